use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use ckpt_core::imgstore::{CopyStatus, ImageStore};
use ckpt_core::jobrt::{restore_for, JobSpec, JobState, WorkloadKind};
use ckpt_core::proto::net::{request_checkpoint, request_restart, request_status, AgentWorker, NetError, ServerConfig};
use ckpt_core::proto::{write_atomic, StateFile};
use ckpt_core::scenario::run_scenario_file;
use ckpt_core::sup::{
    command_file_path, read_command_file, start_coordinator, stop_coordinator, Endpoint, EndpointRegistry, ENV_HOST,
    ENV_PORT,
};
use ckpt_core::timefmt::format_comment;

/// Checkpoint/restart operator tool.
///
/// `run` drives a whole simulated scenario. `serve` starts a live
/// coordinator plus one job in this process; `now`, `images`, `restart`
/// and `status` operate on a served job from another shell.
#[derive(Parser)]
#[command(name = "ckpt", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Target {
    /// Directory holding `ckpt_command.<jobid>`, coordinator state and `images/`.
    #[arg(long, default_value = ".")]
    dir: PathBuf,
    /// Coordinator host; overrides the command file.
    #[arg(long, env = ENV_HOST)]
    host: Option<String>,
    /// Coordinator port; overrides the command file.
    #[arg(long, env = ENV_PORT)]
    port: Option<u16>,
    /// Seconds to wait for the coordinator.
    #[arg(long, default_value_t = 30)]
    timeout: u64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file or preset (fig4-top, fig4-middle, fig4-bottom).
    ///
    /// Writes events.log, trace_<id>.csv, overhead.txt, ledger.txt, job
    /// logs and images into the output directory. Exit status: 0 success,
    /// 1 job failure, 2 configuration error, 3 checkpoint failure.
    Run {
        scenario: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve one job under a TCP coordinator until it completes.
    Serve {
        #[arg(long)]
        job: u64,
        #[arg(long, default_value = "matrix-iter")]
        kind: String,
        #[arg(long, default_value_t = 600)]
        steps: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Milliseconds per job step.
        #[arg(long, default_value_t = 100)]
        step_ms: u64,
        /// Listen address; port 0 picks a free one.
        #[arg(long, default_value = "127.0.0.1:0")]
        endpoint: String,
        /// Working directory for the command file, state and images.
        #[arg(long, default_value = ".")]
        dir: PathBuf,
        /// Image generations retained.
        #[arg(long, default_value_t = ImageStore::DEFAULT_KEEP)]
        keep: u32,
    },
    /// Checkpoint a served job now and print the committed generation.
    Now {
        jobid: u64,
        #[command(flatten)]
        target: Target,
    },
    /// List a job's image generations with per-copy verification.
    Images {
        jobid: u64,
        /// Directory containing `images/`.
        #[arg(long, default_value = ".")]
        dir: PathBuf,
    },
    /// Roll a served job back to a generation (default: newest).
    Restart {
        jobid: u64,
        #[arg(long)]
        gen: Option<u32>,
        #[command(flatten)]
        target: Target,
    },
    /// Print coordinator status and the job's consumed-time comment.
    Status {
        jobid: u64,
        #[command(flatten)]
        target: Target,
    },
}

/// Error tagged with the exit status it maps to.
struct Failure(u8, anyhow::Error);

fn config(e: impl Into<anyhow::Error>) -> Failure {
    Failure(2, e.into())
}

fn net(e: NetError) -> Failure {
    let code = match &e {
        NetError::Rejected(_) | NetError::Round(_) => 3,
        _ => 1,
    };
    Failure(code, e.into())
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure(1, e)
    }
}

fn coordinator_addr(jobid: u64, t: &Target) -> Result<SocketAddr, Failure> {
    let text = match (&t.host, t.port) {
        (Some(h), Some(p)) => format!("{h}:{p}"),
        (None, None) => read_command_file(&t.dir, jobid)
            .map_err(|e| config(anyhow!(e).context(format!("no coordinator advertised for job {jobid}"))))?,
        _ => return Err(config(anyhow!("{ENV_HOST} and {ENV_PORT} must be set together"))),
    };
    text.to_socket_addrs()
        .map_err(|e| config(anyhow!("bad coordinator address {text:?}: {e}")))?
        .next()
        .ok_or_else(|| config(anyhow!("coordinator address {text:?} did not resolve")))
}

fn status_path(dir: &Path, jobid: u64) -> PathBuf {
    dir.join(format!("ckpt_status.{jobid}"))
}

struct ServeArgs<'a> {
    job: u64,
    kind: &'a str,
    steps: u64,
    seed: u64,
    step_ms: u64,
    endpoint: &'a str,
    dir: &'a Path,
    keep: u32,
}

fn serve(a: ServeArgs<'_>) -> Result<(), Failure> {
    let ServeArgs { job, kind, steps, seed, step_ms, endpoint, dir, keep } = a;
    let kind = WorkloadKind::parse(kind).ok_or_else(|| config(anyhow!("unknown workload kind {kind:?}")))?;
    let spec = JobSpec::new(job, kind, steps, seed, 1);
    spec.validate().map_err(config)?;
    let endpoint = Endpoint::parse(endpoint).map_err(config)?;
    if matches!(endpoint, Endpoint::InMemory(_)) {
        return Err(config(anyhow!("serve needs a TCP endpoint")));
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let store = ImageStore::with_policy(dir.join("images"), ImageStore::DEFAULT_REDUNDANCY, keep).map_err(config)?;
    let server_cfg = ServerConfig {
        state_file: Some(StateFile::new(dir.join(format!("coordinator.{job}.state")))),
        ..ServerConfig::default()
    };
    let mut reg = EndpointRegistry::default();
    let handle = start_coordinator(&mut reg, job, &endpoint, dir, server_cfg).map_err(config)?;
    println!("coordinator listening on {}", handle.endpoint);
    println!("command file {}", command_file_path(dir, job).display());

    let state = match store.latest_generation(job).map_err(|e| Failure(3, e.into()))? {
        Some(_) => {
            let img = store.read_latest(job).map_err(|e| Failure(3, e.into()))?;
            let s = restore_for(&spec, &img.payload).map_err(|e| Failure(3, e.into()))?;
            println!("restored generation {} at step {}", img.generation, s.steps_done);
            s
        }
        None => JobState::launch(spec).map_err(|e| Failure(1, e.into()))?,
    };
    let addr = handle.server().expect("tcp coordinator").local_addr();
    let worker = AgentWorker::spawn(addr, 0, state, store, Duration::from_millis(step_ms)).map_err(net)?;
    let started = Instant::now();
    while !worker.is_finished() {
        let comment = format_comment(started.elapsed().as_secs());
        write_atomic(&status_path(dir, job), format!("{comment}\n").as_bytes())
            .with_context(|| "writing status file")?;
        thread::sleep(Duration::from_millis(200));
    }
    let result = worker.join();
    stop_coordinator(&mut reg, handle, &endpoint);
    let done = result.map_err(net)?;
    write_atomic(&status_path(dir, job), format!("{}\n", format_comment(started.elapsed().as_secs())).as_bytes())
        .with_context(|| "writing status file")?;
    println!("job {job} completed at step {} digest={:016x}", done.steps_done, done.digest());
    Ok(())
}

fn images(jobid: u64, dir: &Path) -> Result<(), Failure> {
    let store = ImageStore::new(dir.join("images"));
    let gens = store.generations(jobid).map_err(|e| Failure(3, e.into()))?;
    if gens.is_empty() {
        println!("job {jobid}: no images");
    }
    for g in gens {
        let verdicts = store.verify(jobid, g).map_err(|e| Failure(3, e.into()))?;
        let restorable = verdicts.iter().any(|v| v.status == CopyStatus::Ok);
        let copies: Vec<String> =
            verdicts.iter().map(|v| format!("copy{}={}", v.copy, format!("{:?}", v.status).to_lowercase())).collect();
        println!("gen={g} {} {}", copies.join(" "), if restorable { "restorable" } else { "UNRECOVERABLE" });
    }
    Ok(())
}

fn dispatch(cmd: Cmd) -> Result<u8, Failure> {
    match cmd {
        Cmd::Run { scenario, out } => {
            let r = run_scenario_file(&scenario, &out);
            if let Some(e) = &r.error {
                eprintln!("ckpt: {e}");
            }
            for j in &r.jobs {
                println!(
                    "job {} {} consumed={} checkpoints={} restarts={}",
                    j.job_id,
                    j.completed_at().map_or_else(|| "did not complete".to_string(), |t| format!("completed at {t}")),
                    j.ledger.consumed,
                    j.ledger.checkpoints_taken,
                    j.ledger.restarts,
                );
            }
            Ok(r.class.code() as u8)
        }
        Cmd::Serve { job, kind, steps, seed, step_ms, endpoint, dir, keep } => {
            serve(ServeArgs { job, kind: &kind, steps, seed, step_ms, endpoint: &endpoint, dir: &dir, keep })
                .map(|()| 0)
        }
        Cmd::Now { jobid, target } => {
            let addr = coordinator_addr(jobid, &target)?;
            let g = request_checkpoint(addr, Duration::from_secs(target.timeout)).map_err(net)?;
            println!("generation {g}");
            Ok(0)
        }
        Cmd::Images { jobid, dir } => images(jobid, &dir).map(|()| 0),
        Cmd::Restart { jobid, gen, target } => {
            let addr = coordinator_addr(jobid, &target)?;
            let g = request_restart(addr, gen, Duration::from_secs(target.timeout)).map_err(net)?;
            println!("restarted from generation {g}");
            Ok(0)
        }
        Cmd::Status { jobid, target } => {
            let addr = coordinator_addr(jobid, &target)?;
            let line = request_status(addr, Duration::from_secs(target.timeout)).map_err(net)?;
            println!("job={jobid} {line}");
            match std::fs::read_to_string(status_path(&target.dir, jobid)) {
                Ok(c) => println!("comment {}", c.trim_end()),
                Err(_) => println!("comment unavailable"),
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(Failure(code, e)) => {
            eprintln!("ckpt: {e:#}");
            ExitCode::from(code)
        }
    }
}
