//! Job supervisor: runs a job under a coordinator across scheduler
//! allocations, takes interval and preemption checkpoints, requeues, and
//! keeps walltime accounting.

mod endpoint;
mod sim;
mod supervisor;

pub use endpoint::{
    command_file_path, read_command_file, start_coordinator, stop_coordinator, CoordinatorHandle, Endpoint,
    EndpointRegistry, ENV_HOST, ENV_PORT,
};
pub use sim::{run_cosim, CosimOutcome};
pub use supervisor::{JobOutcome, Supervisor};

use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::imgstore::StoreError;
use crate::jobrt::JobError;
use crate::proto::RoundError;
use crate::sched::SchedError;
use crate::tel::TelError;
use crate::timefmt::{format_comment, format_duration};

#[derive(Debug, Error)]
pub enum SupError {
    #[error("invalid supervisor config: {0}")]
    BadConfig(String),
    #[error("consumed {consumed} exceeds requested {requested}")]
    Overconsumed { requested: u64, consumed: u64 },
    #[error("endpoint {0} is already in use")]
    EndpointBusy(String),
    #[error("coordinator unreachable: {0}")]
    CoordinatorUnreachable(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Round(#[from] RoundError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Job(#[from] JobError),
    #[error(transparent)]
    Tel(#[from] TelError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl SupError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// Failures of the checkpoint machinery itself (images, rounds).
    pub fn is_checkpoint_failure(&self) -> bool {
        matches!(self, Self::Store(_) | Self::Round(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Interval checkpoints, checkpoint on notice, requeue, restore.
    Auto,
    /// Interval checkpoints and restore, but no notice trap.
    Manual,
    /// Interval checkpoints only; every allocation starts fresh.
    CheckpointOnly,
    /// No checkpointing at all.
    NoCr,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Auto, Mode::Manual, Mode::CheckpointOnly, Mode::NoCr];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Auto => "auto",
            Mode::Manual => "manual",
            Mode::CheckpointOnly => "checkpoint-only",
            Mode::NoCr => "no-cr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn checkpoints(self) -> bool {
        self != Mode::NoCr
    }

    pub fn restores(self) -> bool {
        matches!(self, Mode::Auto | Mode::Manual)
    }

    pub fn traps_notice(self) -> bool {
        self == Mode::Auto
    }
}

#[derive(Debug, Clone)]
pub struct SupervisorConfig {
    pub mode: Mode,
    pub requested_walltime: u64,
    pub checkpoint_interval: u64,
    /// Minutes one checkpoint round keeps the job busy.
    pub checkpoint_cost: u64,
    pub signal_lead: u64,
    pub endpoint: Endpoint,
    pub log_path: PathBuf,
    /// Where the command file and coordinator state live.
    pub work_dir: PathBuf,
}

impl SupervisorConfig {
    pub fn validate(&self) -> Result<(), SupError> {
        if self.requested_walltime == 0 {
            return Err(SupError::BadConfig("requested_walltime must be ≥ 1".into()));
        }
        if self.mode.checkpoints()
            && !(0 < self.checkpoint_interval && self.checkpoint_interval < self.requested_walltime)
        {
            return Err(SupError::BadConfig(format!(
                "checkpoint_interval {} must be in 1..{}",
                self.checkpoint_interval, self.requested_walltime
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocationSpan {
    pub start: u64,
    pub end: u64,
    pub node_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLedger {
    pub consumed: u64,
    pub allocations: Vec<AllocationSpan>,
    pub checkpoints_taken: u64,
    pub restarts: u64,
    pub comment_text: String,
    pub steps_executed: u64,
    pub reexecuted_steps: u64,
}

impl Default for RunLedger {
    fn default() -> Self {
        Self {
            consumed: 0,
            allocations: Vec::new(),
            checkpoints_taken: 0,
            restarts: 0,
            comment_text: format_comment(0),
            steps_executed: 0,
            reexecuted_steps: 0,
        }
    }
}

/// Seconds per scheduler tick.
pub const TICK_SECONDS: u64 = 60;

/// Refresh and return the ledger's comment.
pub fn update_comment(ledger: &mut RunLedger) -> String {
    ledger.comment_text = format_comment(ledger.consumed * TICK_SECONDS);
    ledger.comment_text.clone()
}

pub fn compute_remaining(requested: u64, consumed: u64) -> Result<u64, SupError> {
    requested.checked_sub(consumed).ok_or(SupError::Overconsumed { requested, consumed })
}

/// Append-only per-job lifecycle log.
#[derive(Debug, Clone)]
pub struct JobLog {
    path: PathBuf,
    job_id: u64,
}

impl JobLog {
    pub fn new(path: impl Into<PathBuf>, job_id: u64) -> Self {
        Self { path: path.into(), job_id }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn line(&self, t_min: u64, msg: &str) -> Result<(), SupError> {
        let mut f =
            OpenOptions::new().create(true).append(true).open(&self.path).map_err(|e| SupError::io(&self.path, e))?;
        writeln!(f, "{} job={} {msg}", format_duration(t_min * TICK_SECONDS), self.job_id)
            .map_err(|e| SupError::io(&self.path, e))
    }
}
