use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use super::Scenario;
use crate::imgstore::ImageStore;
use crate::jobrt::JobState;
use crate::sched::{ClusterEvent, ClusterState, JobStatus, QueuedJob};
use crate::sup::{
    run_cosim, Endpoint, EndpointRegistry, JobOutcome, RunLedger, SupError, Supervisor, SupervisorConfig,
};
use crate::tel::{
    detect_checkpoint_spikes, detect_idle_gaps, export_csv, overhead_report, MetricTrace, OverheadReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitClass {
    Success,
    JobFailure,
    Config,
    CheckpointFailure,
}

impl ExitClass {
    pub fn code(self) -> i32 {
        match self {
            ExitClass::Success => 0,
            ExitClass::JobFailure => 1,
            ExitClass::Config => 2,
            ExitClass::CheckpointFailure => 3,
        }
    }

    fn of(e: &SupError) -> Self {
        match e {
            e if e.is_checkpoint_failure() => ExitClass::CheckpointFailure,
            SupError::BadConfig(_) | SupError::EndpointBusy(_) => ExitClass::Config,
            _ => ExitClass::JobFailure,
        }
    }
}

#[derive(Debug, Clone)]
pub struct JobReport {
    pub job_id: u64,
    pub outcome: Option<JobOutcome>,
    pub sched_status: Option<JobStatus>,
    pub ledger: RunLedger,
    pub trace: MetricTrace,
    pub checkpoint_times: Vec<u64>,
    pub aborted_rounds: u64,
    pub spikes: Vec<u64>,
    pub idle_gaps: Vec<(u64, u64)>,
    pub uninterrupted_digest: u64,
    /// Trace of the same job run once without checkpointing.
    pub baseline_trace: MetricTrace,
    pub overhead: Result<OverheadReport, String>,
}

impl JobReport {
    pub fn digest(&self) -> Option<u64> {
        match self.outcome {
            Some(JobOutcome::Completed { digest, .. }) => Some(digest),
            _ => None,
        }
    }

    pub fn completed_at(&self) -> Option<u64> {
        match self.outcome {
            Some(JobOutcome::Completed { at, .. }) => Some(at),
            _ => None,
        }
    }

    fn status(&self) -> &'static str {
        match (&self.outcome, self.sched_status) {
            (Some(JobOutcome::Completed { .. }), _) => "completed",
            (Some(JobOutcome::TimedOut { .. }), _) => "timed-out",
            (None, Some(JobStatus::Starved)) => "starved",
            _ => "unfinished",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub class: ExitClass,
    pub error: Option<String>,
    pub events: Vec<ClusterEvent>,
    pub jobs: Vec<JobReport>,
    pub end_time: u64,
}

impl ScenarioReport {
    fn config_error(msg: String) -> Self {
        Self { class: ExitClass::Config, error: Some(msg), events: Vec::new(), jobs: Vec::new(), end_time: 0 }
    }

    pub fn job(&self, job_id: u64) -> Option<&JobReport> {
        self.jobs.iter().find(|j| j.job_id == job_id)
    }
}

struct SimRun {
    events: Vec<ClusterEvent>,
    sups: Vec<Supervisor>,
    statuses: Vec<Option<JobStatus>>,
    end_time: u64,
    error: Option<SupError>,
}

fn simulate(scn: &Scenario, dir: &Path) -> Result<SimRun, SupError> {
    fs::create_dir_all(dir).map_err(|e| SupError::io(dir, e))?;
    let mut sched = ClusterState::new(scn.cluster.clone())?;
    let store = ImageStore::new(dir.join("images"));
    let mut sups = Vec::new();
    for (i, j) in scn.jobs.iter().enumerate() {
        let id = j.spec.job_id;
        let endpoint = match &scn.endpoint {
            Endpoint::InMemory(p) => Endpoint::InMemory(
                u16::try_from(i)
                    .ok()
                    .and_then(|i| p.checked_add(i))
                    .ok_or_else(|| SupError::BadConfig(format!("no in-memory port left for job {id}")))?,
            ),
            tcp => tcp.clone(),
        };
        let cfg = SupervisorConfig {
            mode: scn.mode,
            requested_walltime: j.requested_walltime,
            checkpoint_interval: scn.checkpoint_interval,
            checkpoint_cost: scn.checkpoint_cost,
            signal_lead: scn.cluster.signal_lead,
            endpoint,
            log_path: dir.join(format!("job_{id}.log")),
            work_dir: dir.to_path_buf(),
        };
        let mut s = Supervisor::new(cfg, j.spec.clone(), store.clone(), scn.telemetry.clone())?;
        s.faults = j.faults.clone();
        sched.submit(QueuedJob::new(id, j.nodes, j.requested_walltime, j.window))?;
        sups.push(s);
    }
    let mut reg = EndpointRegistry::default();
    let mut events = Vec::new();
    let (end_time, error) = match run_cosim(&mut sched, &mut sups, &mut reg, scn.horizon, &mut events) {
        Ok(o) => (o.end_time, None),
        Err(e) => (sched.clock(), Some(e)),
    };
    let statuses = sups.iter().map(|s| sched.status(s.job_id())).collect();
    Ok(SimRun { events, sups, statuses, end_time, error })
}

const OWNED_PREFIXES: [&str; 5] = ["trace_", "job_", "coordinator.", "ckpt_command.", ".tmp"];
const OWNED_FILES: [&str; 3] = ["events.log", "overhead.txt", "ledger.txt"];
const OWNED_DIRS: [&str; 2] = ["images", "baseline"];

/// Remove artifacts of an earlier run so reruns start from scratch.
fn clean_out_dir(out: &Path) -> io::Result<()> {
    for entry in fs::read_dir(out)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let path = entry.path();
        if OWNED_DIRS.contains(&name.as_str()) && path.is_dir() {
            fs::remove_dir_all(&path)?;
        } else if OWNED_FILES.contains(&name.as_str()) || OWNED_PREFIXES.iter().any(|p| name.starts_with(p)) {
            fs::remove_file(&path)?;
        }
    }
    Ok(())
}

fn uninterrupted_digest(spec: &crate::jobrt::JobSpec) -> Result<u64, SupError> {
    let mut job = JobState::launch(spec.clone())?;
    job.run_to_end()?;
    Ok(job.digest())
}

/// Resolve a preset name or scenario path and run it. Unreadable or
/// malformed scenarios produce no artifacts.
pub fn run_scenario_file(arg: &str, out: &Path) -> ScenarioReport {
    match Scenario::resolve(arg) {
        Ok(s) => run_scenario(&s, out),
        Err(e) => ScenarioReport::config_error(e.to_string()),
    }
}

pub fn run_scenario(scn: &Scenario, out: &Path) -> ScenarioReport {
    if let Err(e) = scn.validate() {
        return ScenarioReport::config_error(e.to_string());
    }
    if let Err(e) = fs::create_dir_all(out).and_then(|()| clean_out_dir(out)) {
        return ScenarioReport::config_error(format!("{}: {e}", out.display()));
    }
    match execute(scn, out) {
        Ok(r) => r,
        Err(e) => ScenarioReport {
            class: ExitClass::of(&e),
            error: Some(e.to_string()),
            ..ScenarioReport::config_error(String::new())
        },
    }
}

fn execute(scn: &Scenario, out: &Path) -> Result<ScenarioReport, SupError> {
    let base = simulate(&scn.uninterrupted(), &out.join("baseline"))?;
    let run = simulate(scn, out)?;
    let tel = &scn.telemetry;

    let mut jobs = Vec::new();
    for ((s, status), b) in run.sups.iter().zip(&run.statuses).zip(&base.sups) {
        let trace = s.trace().clone();
        let spikes = detect_checkpoint_spikes(&trace, tel.spike_factor, tel.median_window).unwrap_or_default();
        let idle_gaps = detect_idle_gaps(&trace).unwrap_or_default();
        let overhead = overhead_report(b.trace(), &trace, tel).map_err(|e| e.to_string());
        jobs.push(JobReport {
            job_id: s.job_id(),
            outcome: s.outcome().cloned(),
            sched_status: *status,
            ledger: s.ledger().clone(),
            trace,
            checkpoint_times: s.checkpoint_times().to_vec(),
            aborted_rounds: s.aborted_rounds(),
            spikes,
            idle_gaps,
            uninterrupted_digest: uninterrupted_digest(s.spec())?,
            baseline_trace: b.trace().clone(),
            overhead,
        });
    }

    let (class, error) = match &run.error {
        Some(e) => (ExitClass::of(e), Some(e.to_string())),
        None => match jobs.iter().find(|j| j.digest() != Some(j.uninterrupted_digest)) {
            Some(j) if j.digest().is_some() => {
                (ExitClass::JobFailure, Some(format!("job {} digest differs from uninterrupted run", j.job_id)))
            }
            Some(j) => (ExitClass::JobFailure, Some(format!("job {} {}", j.job_id, j.status()))),
            None => (ExitClass::Success, None),
        },
    };
    let report = ScenarioReport { class, error, events: run.events, jobs, end_time: run.end_time };
    write_artifacts(scn, out, &report)?;
    Ok(report)
}

fn write_artifacts(scn: &Scenario, out: &Path, r: &ScenarioReport) -> Result<(), SupError> {
    let write = |name: &str, text: &str| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| SupError::io(&p, e))
    };

    let mut events = String::new();
    for e in &r.events {
        writeln!(events, "{e}").unwrap();
    }
    write("events.log", &events)?;

    let mut overhead = String::new();
    let mut ledger = String::new();
    writeln!(ledger, "scenario={} mode={} end_time={} exit={}", scn.name, scn.mode.name(), r.end_time, r.class.code())
        .unwrap();
    if let Some(e) = &r.error {
        writeln!(ledger, "error={e}").unwrap();
    }
    for j in &r.jobs {
        export_csv(&j.trace, &out.join(format!("trace_{}.csv", j.job_id)))?;

        writeln!(overhead, "[job.{}]", j.job_id).unwrap();
        match &j.overhead {
            Ok(o) => overhead.push_str(&o.to_kv()),
            Err(e) => writeln!(overhead, "unavailable={e}").unwrap(),
        }

        let l = &j.ledger;
        let digest = j.digest().map(|d| format!("{d:016x}")).unwrap_or_else(|| "-".into());
        let list = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        let gaps: Vec<String> = j.idle_gaps.iter().map(|(a, b)| format!("{a}-{b}")).collect();
        writeln!(
            ledger,
            "job={} status={} completed_at={} allocations={} consumed_min={} comment={} checkpoints={} restarts={} \
             aborted_rounds={} steps_executed={} reexecuted_steps={} digest={digest} uninterrupted_digest={:016x} \
             digest_match={} checkpoint_times={} spikes={} idle_gaps={}",
            j.job_id,
            j.status(),
            j.completed_at().map_or_else(|| "-".into(), |t| t.to_string()),
            l.allocations.len(),
            l.consumed,
            l.comment_text,
            l.checkpoints_taken,
            l.restarts,
            j.aborted_rounds,
            l.steps_executed,
            l.reexecuted_steps,
            j.uninterrupted_digest,
            j.digest() == Some(j.uninterrupted_digest),
            list(&j.checkpoint_times),
            list(&j.spikes),
            gaps.join(","),
        )
        .unwrap();
        for (k, a) in l.allocations.iter().enumerate() {
            let nodes: Vec<String> = a.node_ids.iter().map(usize::to_string).collect();
            writeln!(
                ledger,
                "job={} allocation={} start={} end={} nodes={}",
                j.job_id,
                k + 1,
                a.start,
                a.end,
                nodes.join(",")
            )
            .unwrap();
        }
    }
    write("overhead.txt", &overhead)?;
    write("ledger.txt", &ledger)
}
