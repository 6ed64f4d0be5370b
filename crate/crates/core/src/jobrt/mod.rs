//! Deterministic, step-based checkpointable workloads.
//!
//! A job advances in discrete steps and can only be captured at a step
//! boundary. Three workload kinds exercise different state shapes: a scalar
//! counter, a PRNG stream folded into a running digest, and a 32-element
//! vector iterated under a seed-derived affine map.

mod snapshot;
mod vid;
mod workload;

pub use snapshot::{restore, restore_for, snapshot, SNAPSHOT_HEADER_LEN, SNAPSHOT_VERSION};
pub use vid::{remap_id, VidError, VirtualIdTable};
pub use workload::{make_workload, step, JobSpec, JobState, JobStatus, MemModel, WorkloadKind};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JobError {
    #[error("bad job spec: {0}")]
    BadSpec(String),
    #[error("job {0} already completed")]
    AlreadyCompleted(u64),
    #[error("job {0} is quiesced; resume it before stepping")]
    NotRunning(u64),
    #[error("unsupported snapshot version {0}")]
    BadSnapshotVersion(u16),
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
}
