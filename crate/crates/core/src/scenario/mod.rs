//! Scenario files and presets, and the end-to-end scenario runner.

mod run;

pub use run::{run_scenario, run_scenario_file, ExitClass, JobReport, ScenarioReport};

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ini::Ini;
use thiserror::Error;

use crate::jobrt::{JobSpec, MemModel, WorkloadKind};
use crate::proto::AgentFaults;
use crate::sched::ClusterConfig;
use crate::sup::{Endpoint, Mode};
use crate::tel::TelemetryConfig;

pub const PRESETS: [&str; 3] = ["fig4-top", "fig4-middle", "fig4-bottom"];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("unknown key {key:?} in [{section}]")]
    UnknownKey { section: String, key: String },
    #[error("bad value {value:?} for {key} in [{section}]")]
    BadValue { section: String, key: String, value: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobEntry {
    pub spec: JobSpec,
    pub requested_walltime: u64,
    /// Scheduler window length per allocation.
    pub window: u64,
    pub nodes: usize,
    pub faults: AgentFaults,
}

impl JobEntry {
    pub fn new(spec: JobSpec, requested_walltime: u64, window: u64) -> Self {
        Self { spec, requested_walltime, window, nodes: 1, faults: AgentFaults::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub cluster: ClusterConfig,
    pub mode: Mode,
    pub checkpoint_interval: u64,
    pub checkpoint_cost: u64,
    /// Endpoint of the first job; in-memory ports are offset by job index.
    pub endpoint: Endpoint,
    pub telemetry: TelemetryConfig,
    /// Last simulated minute.
    pub horizon: u64,
    pub jobs: Vec<JobEntry>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            cluster: ClusterConfig::default(),
            mode: Mode::Auto,
            checkpoint_interval: 10,
            checkpoint_cost: 0,
            endpoint: Endpoint::InMemory(7000),
            telemetry: TelemetryConfig::default(),
            horizon: 10_000,
            jobs: Vec::new(),
        }
    }
}

fn preset_mem() -> MemModel {
    MemModel { base_mb: 1000.0, decay_mb_per_min: 0.02, ckpt_spike_fraction: 0.008 }
}

fn preset_job(steps: u64, walltime: u64, window: u64) -> JobEntry {
    let spec = JobSpec::new(1, WorkloadKind::MatrixIter, steps, 42, 1).with_mem_model(preset_mem());
    JobEntry::new(spec, walltime, window)
}

impl Scenario {
    pub fn preset(name: &str) -> Result<Self, ScenarioError> {
        let base = Scenario { name: name.to_string(), checkpoint_cost: 1, ..Scenario::default() };
        let s = match name {
            "fig4-top" => Scenario { mode: Mode::NoCr, jobs: vec![preset_job(30, 60, 60)], ..base },
            "fig4-middle" => Scenario { mode: Mode::CheckpointOnly, jobs: vec![preset_job(30, 60, 60)], ..base },
            "fig4-bottom" => Scenario {
                mode: Mode::Auto,
                cluster: ClusterConfig { requeue_delay: 16, ..ClusterConfig::default() },
                jobs: vec![preset_job(40, 60, 33)],
                ..base
            },
            other => return Err(ScenarioError::UnknownPreset(other.to_string())),
        };
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ScenarioError::Read { path: path.display().to_string(), source: e })?;
        Self::parse(&text)
    }

    /// A preset name or the path of a scenario file.
    pub fn resolve(arg: &str) -> Result<Self, ScenarioError> {
        if PRESETS.contains(&arg) && !Path::new(arg).exists() {
            return Self::preset(arg);
        }
        Self::load(Path::new(arg))
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let ini = Ini::load_from_str(text).map_err(|e| ScenarioError::Syntax(e.to_string()))?;
        let mut s = match ini.general_section().get("preset") {
            Some(p) => Self::preset(p.trim())?,
            None => Self::default(),
        };
        for (section, props) in ini.iter() {
            let sec = section.unwrap_or("");
            for (key, value) in props.iter() {
                let value = value.trim();
                match sec {
                    "" => s.set_top(key, value)?,
                    "cluster" => s.set_cluster(key, value)?,
                    "supervisor" => s.set_supervisor(key, value)?,
                    "telemetry" => s.set_telemetry(key, value)?,
                    _ => match sec.strip_prefix("job") {
                        Some(rest) => {
                            let id = match rest {
                                "" => 1,
                                r => r
                                    .strip_prefix('.')
                                    .and_then(|n| n.parse().ok())
                                    .ok_or_else(|| ScenarioError::UnknownSection(sec.to_string()))?,
                            };
                            s.job_entry(id).set(sec, key, value)?;
                        }
                        None => return Err(ScenarioError::UnknownSection(sec.to_string())),
                    },
                }
            }
            if sec.starts_with("job") && props.is_empty() {
                let id = sec.strip_prefix("job.").and_then(|n| n.parse().ok()).unwrap_or(1);
                s.job_entry(id);
            }
        }
        s.validate()?;
        Ok(s)
    }

    fn job_entry(&mut self, id: u64) -> &mut JobEntry {
        if let Some(i) = self.jobs.iter().position(|j| j.spec.job_id == id) {
            return &mut self.jobs[i];
        }
        let spec = JobSpec::new(id, WorkloadKind::Counter, 60, 1, 1);
        self.jobs.push(JobEntry::new(spec, 60, 60));
        self.jobs.last_mut().unwrap()
    }

    fn set_top(&mut self, key: &str, value: &str) -> Result<(), ScenarioError> {
        match key {
            "preset" => {}
            "name" => self.name = value.to_string(),
            "mode" => self.mode = Mode::parse(value).ok_or_else(|| bad("", key, value))?,
            "horizon" => self.horizon = num("", key, value)?,
            _ => return Err(unknown("", key)),
        }
        Ok(())
    }

    fn set_cluster(&mut self, key: &str, value: &str) -> Result<(), ScenarioError> {
        let c = &mut self.cluster;
        match key {
            "nodes" => c.nodes = num("cluster", key, value)?,
            "signal_lead" => c.signal_lead = num("cluster", key, value)?,
            "requeue_delay" => c.requeue_delay = num("cluster", key, value)?,
            "backfill" => c.backfill = value.parse().map_err(|_| bad("cluster", key, value))?,
            _ => return Err(unknown("cluster", key)),
        }
        Ok(())
    }

    fn set_supervisor(&mut self, key: &str, value: &str) -> Result<(), ScenarioError> {
        match key {
            "mode" => self.mode = Mode::parse(value).ok_or_else(|| bad("supervisor", key, value))?,
            "checkpoint_interval" => self.checkpoint_interval = num("supervisor", key, value)?,
            "checkpoint_cost" => self.checkpoint_cost = num("supervisor", key, value)?,
            "endpoint" => self.endpoint = Endpoint::parse(value).map_err(|_| bad("supervisor", key, value))?,
            _ => return Err(unknown("supervisor", key)),
        }
        Ok(())
    }

    fn set_telemetry(&mut self, key: &str, value: &str) -> Result<(), ScenarioError> {
        let t = &mut self.telemetry;
        match key {
            "sample_period" => t.sample_period = num("telemetry", key, value)?,
            "ckpt_cpu_pct" => t.ckpt_cpu_pct = num("telemetry", key, value)?,
            "spike_factor" => t.spike_factor = num("telemetry", key, value)?,
            "median_window" => t.median_window = num("telemetry", key, value)?,
            _ => return Err(unknown("telemetry", key)),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |m: String| Err(ScenarioError::Invalid(m));
        if self.jobs.is_empty() {
            return invalid("no jobs".into());
        }
        self.cluster.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if self.telemetry.sample_period != 1 {
            return invalid("only sample_period = 1 is supported".into());
        }
        if !(0.0..=100.0).contains(&self.telemetry.ckpt_cpu_pct) {
            return invalid("ckpt_cpu_pct must be in 0..=100".into());
        }
        if !(self.telemetry.spike_factor >= 1.0) || self.telemetry.median_window == 0 {
            return invalid("spike_factor must be >= 1 and median_window >= 1".into());
        }
        let mut ids = BTreeSet::new();
        for j in &self.jobs {
            let id = j.spec.job_id;
            if !ids.insert(id) {
                return invalid(format!("duplicate job {id}"));
            }
            j.spec.validate().map_err(|e| ScenarioError::Invalid(format!("job {id}: {e}")))?;
            if j.requested_walltime == 0 || j.window == 0 || j.nodes == 0 {
                return invalid(format!("job {id}: walltime, window and nodes must be >= 1"));
            }
            if self.mode.checkpoints()
                && !(0 < self.checkpoint_interval && self.checkpoint_interval < j.requested_walltime)
            {
                return invalid(format!(
                    "job {id}: checkpoint_interval {} must be in 1..{}",
                    self.checkpoint_interval, j.requested_walltime
                ));
            }
        }
        Ok(())
    }

    /// The same jobs run without checkpointing in one allocation covering
    /// the whole walltime.
    pub fn uninterrupted(&self) -> Scenario {
        let mut s = self.clone();
        s.name = format!("{}-uninterrupted", self.name);
        s.mode = Mode::NoCr;
        for j in &mut s.jobs {
            j.window = j.requested_walltime;
            j.faults = AgentFaults::default();
        }
        s
    }
}

impl JobEntry {
    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), ScenarioError> {
        let m = &mut self.spec.mem_model;
        match key {
            "kind" => self.spec.kind = WorkloadKind::parse(value).ok_or_else(|| bad(section, key, value))?,
            "steps" => self.spec.total_steps = num(section, key, value)?,
            "seed" => self.spec.seed = num(section, key, value)?,
            "step_cost" => self.spec.step_cost = num(section, key, value)?,
            "walltime" => self.requested_walltime = num(section, key, value)?,
            "window" => self.window = num(section, key, value)?,
            "nodes" => self.nodes = num(section, key, value)?,
            "base_mb" => m.base_mb = num(section, key, value)?,
            "decay_mb_per_min" => m.decay_mb_per_min = num(section, key, value)?,
            "spike_fraction" => m.ckpt_spike_fraction = num(section, key, value)?,
            "fail_writes_at" => {
                self.faults.fail_writes_at = value
                    .split(',')
                    .filter(|v| !v.trim().is_empty())
                    .map(|v| num(section, key, v.trim()))
                    .collect::<Result<_, _>>()?;
            }
            _ => return Err(unknown(section, key)),
        }
        Ok(())
    }
}

fn num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T, ScenarioError> {
    value.parse().map_err(|_| bad(section, key, value))
}

fn bad(section: &str, key: &str, value: &str) -> ScenarioError {
    ScenarioError::BadValue { section: section.into(), key: key.into(), value: value.into() }
}

fn unknown(section: &str, key: &str) -> ScenarioError {
    ScenarioError::UnknownKey { section: section.into(), key: key.into() }
}
