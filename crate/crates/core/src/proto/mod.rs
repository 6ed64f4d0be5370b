//! Coordinator/agent checkpoint protocol.
//!
//! A round runs broadcast → quiesce → write image → ack → commit. The
//! coordinator and agent state machines are pure; the drivers in
//! [`round`] (in-memory links) and [`net`] (loopback TCP) move encoded
//! frames between them.

mod agent;
mod coordinator;
mod frame;
pub mod net;
pub mod round;
mod state_file;

pub use agent::{agent_step, AgentAction, AgentEvent, AgentPhase, AgentState};
pub use coordinator::{coordinator_step, AbortReason, CoordAction, CoordEvent, CoordPhase, CoordinatorState};
pub use frame::{
    decode_frame, encode_frame, CkptFrame, Decoded, FrameError, MsgType, FRAME_HEADER_LEN, FRAME_MAGIC, FRAME_VERSION,
};
pub use round::{connect_agents, run_checkpoint_round, AgentFaults, AgentHost, Coordinator, MemLink, RoundError};
pub use state_file::{write_atomic, StateFile};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtoError {
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("agent {agent}: illegal event {event} in phase {phase:?}")]
    IllegalTransition { agent: u32, phase: AgentPhase, event: String },
}

impl ProtoError {
    pub(crate) fn violation(msg: impl Into<String>) -> Self {
        Self::ProtocolViolation(msg.into())
    }
}
