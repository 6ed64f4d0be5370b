use super::ProtoError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentPhase {
    Running,
    Quiescing,
    Quiesced,
    WritingImage,
    Restarting,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentState {
    pub agent_id: u32,
    pub phase: AgentPhase,
    pub last_acked_generation: u32,
    /// Generation of the round or restart in progress.
    pub target_generation: Option<u32>,
    /// Highest generation this agent has started an image write for.
    pub last_written_generation: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentEvent {
    CkptRequest(u32),
    StepBoundaryReached,
    SnapshotTaken(u32),
    ImageWritten(u32),
    ImageWriteFailed(u32, String),
    RoundAborted(u32),
    RestartRequested(u32),
    ImageLoaded(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentAction {
    CaptureSnapshot(u32),
    WriteImage(u32),
    SendAck(u32),
    SendNack(u32, String),
    LoadImage(u32),
    Resume,
}

impl AgentState {
    pub fn new(agent_id: u32) -> Self {
        Self {
            agent_id,
            phase: AgentPhase::Running,
            last_acked_generation: 0,
            target_generation: None,
            last_written_generation: 0,
        }
    }

    fn illegal(&self, e: &AgentEvent) -> ProtoError {
        ProtoError::IllegalTransition { agent: self.agent_id, phase: self.phase, event: format!("{e:?}") }
    }

    fn expect_target(&self, g: u32, e: &AgentEvent) -> Result<(), ProtoError> {
        if self.target_generation == Some(g) {
            Ok(())
        } else {
            Err(self.illegal(e))
        }
    }

    /// Pure transition. On error the caller keeps the old state.
    pub fn step(&self, e: &AgentEvent) -> Result<(AgentState, Vec<AgentAction>), ProtoError> {
        use AgentPhase::*;
        let mut s = self.clone();
        let actions = match (self.phase, e) {
            (Running, AgentEvent::CkptRequest(g)) => {
                // at most one image per round
                if *g <= self.last_written_generation {
                    return Err(self.illegal(e));
                }
                s.phase = Quiescing;
                s.target_generation = Some(*g);
                Vec::new()
            }
            (Running, AgentEvent::StepBoundaryReached) => Vec::new(),
            (Quiescing, AgentEvent::StepBoundaryReached) => {
                s.phase = Quiesced;
                vec![AgentAction::CaptureSnapshot(self.target_generation.unwrap_or_default())]
            }
            (Quiesced, AgentEvent::SnapshotTaken(g)) => {
                self.expect_target(*g, e)?;
                s.phase = WritingImage;
                s.last_written_generation = *g;
                vec![AgentAction::WriteImage(*g)]
            }
            (WritingImage, AgentEvent::ImageWritten(g)) => {
                self.expect_target(*g, e)?;
                s.phase = Running;
                s.target_generation = None;
                s.last_acked_generation = *g;
                vec![AgentAction::SendAck(*g), AgentAction::Resume]
            }
            (WritingImage, AgentEvent::ImageWriteFailed(g, reason)) => {
                self.expect_target(*g, e)?;
                s.phase = Running;
                s.target_generation = None;
                s.last_written_generation = s.last_acked_generation;
                vec![AgentAction::SendNack(*g, reason.clone()), AgentAction::Resume]
            }
            (Quiescing | Quiesced | WritingImage, AgentEvent::RoundAborted(g)) => {
                self.expect_target(*g, e)?;
                s.phase = Running;
                s.target_generation = None;
                s.last_written_generation = s.last_acked_generation;
                vec![AgentAction::Resume]
            }
            (Running, AgentEvent::RoundAborted(g)) => {
                // acked image of an aborted round is discarded; generations
                // are contiguous so the previous commit is g - 1
                if *g >= 1 && *g <= s.last_written_generation {
                    s.last_written_generation = g - 1;
                    s.last_acked_generation = s.last_acked_generation.min(g - 1);
                }
                Vec::new()
            }
            (Running, AgentEvent::RestartRequested(g)) => {
                s.phase = Restarting;
                s.target_generation = Some(*g);
                vec![AgentAction::LoadImage(*g)]
            }
            (Restarting, AgentEvent::ImageLoaded(g)) => {
                self.expect_target(*g, e)?;
                s.phase = Running;
                s.target_generation = None;
                s.last_acked_generation = *g;
                s.last_written_generation = s.last_written_generation.max(*g);
                vec![AgentAction::Resume]
            }
            _ => return Err(self.illegal(e)),
        };
        Ok((s, actions))
    }
}

/// Free-function form of [`AgentState::step`].
pub fn agent_step(s: &AgentState, e: &AgentEvent) -> Result<(AgentState, Vec<AgentAction>), ProtoError> {
    s.step(e)
}
