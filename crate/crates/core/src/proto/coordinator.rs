use std::collections::BTreeSet;
use std::fmt;

use super::frame::{CkptFrame, MsgType};
use super::ProtoError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordPhase {
    Idle,
    Collecting,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoordinatorState {
    pub phase: CoordPhase,
    pub connected_agents: BTreeSet<u32>,
    pub pending_acks: BTreeSet<u32>,
    /// Agents the round in flight was sent to, acked or not.
    pub round_agents: BTreeSet<u32>,
    pub committed_generation: u32,
    pub round_generation: u32,
    /// Rounds started since this coordinator came up.
    pub round_attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoordEvent {
    AgentConnected(u32),
    AgentDisconnected(u32),
    CheckpointRequested,
    Ack { agent: u32, generation: u32 },
    Nack { agent: u32, generation: u32, reason: String },
    RoundTimedOut { generation: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AbortReason {
    AgentLost(u32),
    Nack { agent: u32, reason: String },
    Timeout,
    NoAgents,
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::AgentLost(a) => write!(f, "agent {a} disconnected"),
            Self::Nack { agent, reason } => write!(f, "agent {agent} nacked: {reason}"),
            Self::Timeout => f.write_str("round timed out"),
            Self::NoAgents => f.write_str("no agents connected"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoordAction {
    SendToAgent(u32, CkptFrame),
    BroadcastCkptRequest(u32),
    CommitGeneration(u32),
    AbortRound { generation: u32, reason: AbortReason },
}

impl Default for CoordinatorState {
    fn default() -> Self {
        Self::recovered(0)
    }
}

impl CoordinatorState {
    /// Fresh state after a (re)start with `committed` recovered from disk.
    pub fn recovered(committed: u32) -> Self {
        Self {
            phase: CoordPhase::Idle,
            connected_agents: BTreeSet::new(),
            pending_acks: BTreeSet::new(),
            round_agents: BTreeSet::new(),
            committed_generation: committed,
            round_generation: committed,
            round_attempt: 0,
        }
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if self.phase == CoordPhase::Collecting && self.round_generation != self.committed_generation + 1 {
            return Err(format!(
                "collecting round {} but committed {}",
                self.round_generation, self.committed_generation
            ));
        }
        if !self.pending_acks.is_subset(&self.connected_agents) {
            return Err("pending acks not a subset of connected agents".into());
        }
        if self.phase == CoordPhase::Idle && !(self.pending_acks.is_empty() && self.round_agents.is_empty()) {
            return Err("idle with round participants".into());
        }
        if !self.pending_acks.is_subset(&self.round_agents) {
            return Err("pending acks not a subset of round participants".into());
        }
        Ok(())
    }

    /// An ACK/NACK for a round that is no longer in flight, including an
    /// aborted attempt at the current generation. Transports drop these
    /// instead of stepping the machine.
    pub fn is_stale_answer(&self, generation: u32, attempt: Option<u32>) -> bool {
        match self.phase {
            CoordPhase::Idle => generation <= self.committed_generation + 1,
            CoordPhase::Collecting => {
                generation < self.round_generation
                    || generation == self.round_generation && attempt != Some(self.round_attempt)
            }
        }
    }

    fn abort(&mut self, reason: AbortReason) -> Vec<CoordAction> {
        let generation = self.round_generation;
        self.phase = CoordPhase::Idle;
        self.pending_acks.clear();
        self.round_agents.clear();
        self.round_generation = self.committed_generation;
        vec![CoordAction::AbortRound { generation, reason }]
    }

    fn check_answer(&self, agent: u32, generation: u32) -> Result<(), ProtoError> {
        if self.phase != CoordPhase::Collecting {
            return Err(ProtoError::violation(format!("answer from agent {agent} with no round in flight")));
        }
        if generation != self.round_generation {
            return Err(ProtoError::violation(format!(
                "agent {agent} answered generation {generation}, round is {}",
                self.round_generation
            )));
        }
        if !self.pending_acks.contains(&agent) {
            return Err(ProtoError::violation(format!("agent {agent} is not pending")));
        }
        Ok(())
    }

    /// Pure transition. On error the caller keeps the old state.
    pub fn step(&self, e: &CoordEvent) -> Result<(CoordinatorState, Vec<CoordAction>), ProtoError> {
        let mut s = self.clone();
        let actions = match e {
            CoordEvent::AgentConnected(id) => {
                s.connected_agents.insert(*id);
                vec![CoordAction::SendToAgent(*id, CkptFrame::new(MsgType::RestartInfo, s.committed_generation, *id))]
            }
            CoordEvent::AgentDisconnected(id) => {
                if !s.connected_agents.remove(id) {
                    return Err(ProtoError::violation(format!("unknown agent {id} disconnected")));
                }
                if s.phase == CoordPhase::Collecting && s.round_agents.contains(id) {
                    s.abort(AbortReason::AgentLost(*id))
                } else {
                    Vec::new()
                }
            }
            CoordEvent::CheckpointRequested => {
                if s.phase == CoordPhase::Collecting {
                    return Err(ProtoError::violation(format!("round {} already in flight", s.round_generation)));
                }
                if s.connected_agents.is_empty() {
                    vec![CoordAction::AbortRound {
                        generation: s.committed_generation + 1,
                        reason: AbortReason::NoAgents,
                    }]
                } else {
                    s.phase = CoordPhase::Collecting;
                    s.round_generation = s.committed_generation + 1;
                    s.round_attempt = s.round_attempt.wrapping_add(1);
                    s.pending_acks = s.connected_agents.clone();
                    s.round_agents = s.connected_agents.clone();
                    vec![CoordAction::BroadcastCkptRequest(s.round_generation)]
                }
            }
            CoordEvent::Ack { agent, generation } => {
                s.check_answer(*agent, *generation)?;
                s.pending_acks.remove(agent);
                if s.pending_acks.is_empty() {
                    s.phase = CoordPhase::Idle;
                    s.round_agents.clear();
                    s.committed_generation = s.round_generation;
                    vec![CoordAction::CommitGeneration(s.committed_generation)]
                } else {
                    Vec::new()
                }
            }
            CoordEvent::Nack { agent, generation, reason } => {
                s.check_answer(*agent, *generation)?;
                s.abort(AbortReason::Nack { agent: *agent, reason: reason.clone() })
            }
            CoordEvent::RoundTimedOut { generation } => {
                if s.phase != CoordPhase::Collecting || *generation != s.round_generation {
                    // the round already finished
                    Vec::new()
                } else {
                    s.abort(AbortReason::Timeout)
                }
            }
        };
        Ok((s, actions))
    }
}

/// Free-function form of [`CoordinatorState::step`].
pub fn coordinator_step(
    s: &CoordinatorState,
    e: &CoordEvent,
) -> Result<(CoordinatorState, Vec<CoordAction>), ProtoError> {
    s.step(e)
}
