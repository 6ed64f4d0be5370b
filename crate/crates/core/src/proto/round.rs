//! Simulated transport: every agent owns an in-memory duplex byte link to
//! the coordinator, and all traffic goes through the frame codec. A round
//! is driven to completion inside one call, so it cannot time out.

use std::collections::{BTreeSet, VecDeque};
use std::io;

use thiserror::Error;

use super::{
    decode_frame, encode_frame, AbortReason, AgentAction, AgentEvent, AgentState, CkptFrame, CoordAction, CoordEvent,
    CoordPhase, CoordinatorState, Decoded, FrameError, MsgType, ProtoError, StateFile,
};
use crate::imgstore::{ImageStore, StoreError};
use crate::jobrt::{restore_for, snapshot, JobError, JobState};

#[derive(Debug, Error)]
pub enum RoundError {
    #[error("checkpoint round aborted: {0}")]
    RoundAborted(AbortReason),
    #[error("checkpoint round timed out")]
    Timeout,
    #[error(transparent)]
    Protocol(#[from] ProtoError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("failed to persist committed generation: {0}")]
    Persist(#[source] io::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Job(#[from] JobError),
}

impl RoundError {
    pub fn is_abort(&self) -> bool {
        matches!(self, Self::RoundAborted(_) | Self::Timeout)
    }
}

/// In-memory duplex byte channel between one agent and the coordinator.
#[derive(Debug, Default, Clone)]
pub struct MemLink {
    to_agent: VecDeque<u8>,
    to_coord: VecDeque<u8>,
    closed: bool,
}

impl MemLink {
    fn push(buf: &mut VecDeque<u8>, f: &CkptFrame) -> Result<(), FrameError> {
        buf.extend(encode_frame(f)?);
        Ok(())
    }

    fn pop(buf: &mut VecDeque<u8>) -> Result<Option<CkptFrame>, FrameError> {
        match decode_frame(buf.make_contiguous())? {
            Decoded::Frame { frame, consumed } => {
                buf.drain(..consumed);
                Ok(Some(frame))
            }
            Decoded::NeedMoreBytes => Ok(None),
        }
    }

    pub fn send_to_agent(&mut self, f: &CkptFrame) -> Result<(), FrameError> {
        if !self.closed {
            Self::push(&mut self.to_agent, f)?;
        }
        Ok(())
    }

    pub fn recv_from_agent(&mut self) -> Result<Option<CkptFrame>, FrameError> {
        Self::pop(&mut self.to_coord)
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    fn close(&mut self) {
        self.closed = true;
        self.to_agent.clear();
    }
}

/// Injected agent-side failures.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AgentFaults {
    /// Image writes at these virtual times fail.
    pub fail_writes_at: BTreeSet<u64>,
    /// Number of upcoming image writes that fail.
    pub fail_next_writes: u32,
    /// Drop the connection on the next checkpoint request.
    pub disconnect_on_request: bool,
}

/// One agent hosting one job. Images go to `store` under the job's id.
#[derive(Debug)]
pub struct AgentHost {
    state: AgentState,
    job: JobState,
    store: ImageStore,
    link: MemLink,
    pub faults: AgentFaults,
    attempt: u32,
    virtual_time: u64,
    known_committed: u32,
}

impl AgentHost {
    pub fn new(agent_id: u32, job: JobState, store: ImageStore) -> Self {
        Self {
            state: AgentState::new(agent_id),
            job,
            store,
            link: MemLink::default(),
            faults: AgentFaults::default(),
            attempt: 0,
            virtual_time: 0,
            known_committed: 0,
        }
    }

    pub fn agent_id(&self) -> u32 {
        self.state.agent_id
    }

    pub fn state(&self) -> &AgentState {
        &self.state
    }

    pub fn job(&self) -> &JobState {
        &self.job
    }

    pub fn job_mut(&mut self) -> &mut JobState {
        &mut self.job
    }

    pub fn into_job(self) -> JobState {
        self.job
    }

    pub fn store(&self) -> &ImageStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ImageStore {
        &mut self.store
    }

    pub fn link_mut(&mut self) -> &mut MemLink {
        &mut self.link
    }

    pub fn set_virtual_time(&mut self, t: u64) {
        self.virtual_time = t;
    }

    /// Generation the coordinator last announced as committed.
    pub fn known_committed(&self) -> u32 {
        self.known_committed
    }

    /// Open a fresh connection and queue the HELLO.
    pub fn hello(&mut self) -> Result<(), FrameError> {
        self.link = MemLink::default();
        let hello = CkptFrame::new(MsgType::Hello, 0, self.agent_id());
        MemLink::push(&mut self.link.to_coord, &hello)
    }

    pub fn disconnect(&mut self) {
        self.link.close();
    }

    fn send(&mut self, f: CkptFrame) -> Result<(), RoundError> {
        if !self.link.closed {
            MemLink::push(&mut self.link.to_coord, &f)?;
        }
        Ok(())
    }

    fn feed(&mut self, first: AgentEvent) -> Result<(), RoundError> {
        let mut queue = VecDeque::from([first]);
        while let Some(e) = queue.pop_front() {
            let (next, actions) = self.state.step(&e)?;
            self.state = next;
            for a in actions {
                if let Some(follow) = self.perform(a)? {
                    queue.push_back(follow);
                }
            }
        }
        Ok(())
    }

    fn perform(&mut self, a: AgentAction) -> Result<Option<AgentEvent>, RoundError> {
        let id = self.agent_id();
        Ok(match a {
            AgentAction::CaptureSnapshot(g) => {
                self.job.quiesce();
                Some(AgentEvent::SnapshotTaken(g))
            }
            AgentAction::WriteImage(g) => {
                let injected =
                    self.faults.fail_writes_at.contains(&self.virtual_time) || self.faults.fail_next_writes > 0;
                if injected {
                    self.faults.fail_next_writes = self.faults.fail_next_writes.saturating_sub(1);
                    return Ok(Some(AgentEvent::ImageWriteFailed(g, "injected write failure".into())));
                }
                let bytes = snapshot(&self.job);
                let (job_id, vt) = (self.job.job_id(), self.virtual_time);
                match self.store.write_image(job_id, g, vt, &bytes) {
                    Ok(_) => Some(AgentEvent::ImageWritten(g)),
                    Err(e) => Some(AgentEvent::ImageWriteFailed(g, e.to_string())),
                }
            }
            AgentAction::SendAck(g) => {
                let steps = self.job.steps_done.to_be_bytes();
                self.send(CkptFrame::new(MsgType::Ack, g, id).with_attempt(self.attempt, &steps))?;
                None
            }
            AgentAction::SendNack(g, reason) => {
                self.send(CkptFrame::new(MsgType::Nack, g, id).with_attempt(self.attempt, reason.as_bytes()))?;
                None
            }
            AgentAction::LoadImage(g) => {
                let img = self.store.read_generation(self.job.job_id(), g)?;
                self.job = restore_for(&self.job.spec, &img.payload)?;
                Some(AgentEvent::ImageLoaded(g))
            }
            AgentAction::Resume => {
                self.job.resume();
                None
            }
        })
    }

    fn handle(&mut self, f: CkptFrame) -> Result<(), RoundError> {
        match f.msg_type {
            MsgType::CkptRequest => {
                if self.faults.disconnect_on_request {
                    self.faults.disconnect_on_request = false;
                    self.disconnect();
                    return Ok(());
                }
                self.attempt = f.attempt().unwrap_or(0);
                self.feed(AgentEvent::CkptRequest(f.generation))?;
                // cooperative jobs sit at a step boundary between steps
                self.feed(AgentEvent::StepBoundaryReached)
            }
            MsgType::Nack => {
                self.feed(AgentEvent::RoundAborted(f.generation))?;
                self.store.discard_above(self.job.job_id(), f.generation.saturating_sub(1))?;
                Ok(())
            }
            MsgType::Commit => {
                self.known_committed = f.generation;
                self.store.prune(self.job.job_id())?;
                Ok(())
            }
            MsgType::RestartInfo => {
                let committed = f.generation;
                self.known_committed = committed;
                if self.state.last_written_generation > committed {
                    self.feed(AgentEvent::RoundAborted(committed + 1))?;
                }
                self.store.discard_above(self.job.job_id(), committed)?;
                Ok(())
            }
            MsgType::Hello | MsgType::Ack => Err(ProtoError::violation(format!(
                "agent {} received {:?} from coordinator",
                self.agent_id(),
                f.msg_type
            ))
            .into()),
        }
    }

    /// Process every frame waiting on the link. Returns whether any
    /// frame was handled.
    pub fn pump(&mut self) -> Result<bool, RoundError> {
        let mut progressed = false;
        while !self.link.closed {
            let Some(f) = MemLink::pop(&mut self.link.to_agent)? else { break };
            progressed = true;
            self.handle(f)?;
        }
        Ok(progressed)
    }

    /// Replace the job with the image of `generation`, or the newest
    /// readable image when `None`. Returns the generation loaded.
    pub fn restart_from(&mut self, generation: Option<u32>) -> Result<u32, RoundError> {
        let g = match generation {
            Some(g) => g,
            None => self.store.read_latest(self.job.job_id())?.generation,
        };
        let before = (self.state.clone(), self.job.clone());
        if let Err(e) = self.feed(AgentEvent::RestartRequested(g)) {
            (self.state, self.job) = before;
            return Err(e);
        }
        Ok(g)
    }
}

/// The coordinator plus its persisted state.
#[derive(Debug)]
pub struct Coordinator {
    state: CoordinatorState,
    state_file: Option<StateFile>,
}

impl Coordinator {
    /// Start (or restart) a coordinator, recovering the committed
    /// generation from `state_file` when given.
    pub fn start(state_file: Option<StateFile>) -> io::Result<Self> {
        let committed = match &state_file {
            Some(f) => f.load()?,
            None => 0,
        };
        Ok(Self { state: CoordinatorState::recovered(committed), state_file })
    }

    pub fn state(&self) -> &CoordinatorState {
        &self.state
    }

    pub fn committed_generation(&self) -> u32 {
        self.state.committed_generation
    }

    /// Step the state machine; a commit is persisted before it is
    /// announced.
    pub fn apply(&mut self, e: &CoordEvent) -> Result<Vec<CoordAction>, RoundError> {
        let (next, actions) = self.state.step(e)?;
        if let (Some(file), Some(g)) = (
            &self.state_file,
            actions.iter().find_map(|a| match a {
                CoordAction::CommitGeneration(g) => Some(*g),
                _ => None,
            }),
        ) {
            if let Err(err) = file.save(g) {
                self.state.phase = CoordPhase::Idle;
                self.state.pending_acks.clear();
                self.state.round_generation = self.state.committed_generation;
                return Err(RoundError::Persist(err));
            }
        }
        self.state = next;
        Ok(actions)
    }
}

type Outcome = Option<Result<u32, AbortReason>>;

fn dispatch(
    coord: &Coordinator,
    agents: &mut [AgentHost],
    actions: Vec<CoordAction>,
    outcome: &mut Outcome,
) -> Result<(), RoundError> {
    for a in actions {
        match a {
            CoordAction::SendToAgent(id, f) => {
                for ag in agents.iter_mut().filter(|ag| ag.agent_id() == id) {
                    ag.link.send_to_agent(&f)?;
                }
            }
            CoordAction::BroadcastCkptRequest(g) => {
                for ag in agents.iter_mut() {
                    if coord.state.pending_acks.contains(&ag.agent_id()) {
                        let f = CkptFrame::new(MsgType::CkptRequest, g, ag.agent_id())
                            .with_attempt(coord.state.round_attempt, &[]);
                        ag.link.send_to_agent(&f)?;
                    }
                }
            }
            CoordAction::CommitGeneration(g) => {
                for ag in agents.iter_mut() {
                    if coord.state.connected_agents.contains(&ag.agent_id()) {
                        ag.link.send_to_agent(&CkptFrame::new(MsgType::Commit, g, ag.agent_id()))?;
                    }
                }
                *outcome = Some(Ok(g));
            }
            CoordAction::AbortRound { generation, reason } => {
                for ag in agents.iter_mut() {
                    let f = CkptFrame::new(MsgType::Nack, generation, ag.agent_id())
                        .with_payload(reason.to_string().into_bytes());
                    ag.link.send_to_agent(&f)?;
                }
                *outcome = Some(Err(reason));
            }
        }
    }
    Ok(())
}

/// Move frames in both directions until no link has anything left.
fn settle(coord: &mut Coordinator, agents: &mut [AgentHost], outcome: &mut Outcome) -> Result<(), RoundError> {
    loop {
        let mut progressed = false;
        for ag in agents.iter_mut() {
            progressed |= ag.pump()?;
        }
        for i in 0..agents.len() {
            let id = agents[i].agent_id();
            while let Some(f) = agents[i].link.recv_from_agent()? {
                progressed = true;
                if matches!(f.msg_type, MsgType::Ack | MsgType::Nack)
                    && coord.state.is_stale_answer(f.generation, f.attempt())
                {
                    log::debug!("dropping stale {:?} from agent {id} for generation {}", f.msg_type, f.generation);
                    continue;
                }
                let event = match f.msg_type {
                    MsgType::Hello => CoordEvent::AgentConnected(f.agent_id),
                    MsgType::Ack => CoordEvent::Ack { agent: f.agent_id, generation: f.generation },
                    MsgType::Nack => {
                        CoordEvent::Nack { agent: f.agent_id, generation: f.generation, reason: f.text_after_attempt() }
                    }
                    other => {
                        return Err(
                            ProtoError::violation(format!("coordinator received {other:?} from agent {id}")).into()
                        )
                    }
                };
                let actions = coord.apply(&event)?;
                dispatch(coord, agents, actions, outcome)?;
            }
            if agents[i].link.is_closed() && coord.state.connected_agents.contains(&id) {
                progressed = true;
                let actions = coord.apply(&CoordEvent::AgentDisconnected(id))?;
                dispatch(coord, agents, actions, outcome)?;
            }
        }
        if !progressed {
            return Ok(());
        }
    }
}

/// Register every agent with the coordinator (HELLO → RESTART_INFO).
/// Agents drop any image newer than the announced committed generation.
pub fn connect_agents(coord: &mut Coordinator, agents: &mut [AgentHost]) -> Result<(), RoundError> {
    for ag in agents.iter_mut() {
        ag.hello()?;
    }
    let mut outcome = None;
    settle(coord, agents, &mut outcome)
}

/// Run one checkpoint round to commit or abort. On commit every
/// participating agent's image of the new generation is on disk.
pub fn run_checkpoint_round(
    coord: &mut Coordinator,
    agents: &mut [AgentHost],
    virtual_time: u64,
) -> Result<u32, RoundError> {
    for ag in agents.iter_mut() {
        ag.set_virtual_time(virtual_time);
    }
    let mut outcome = None;
    let actions = coord.apply(&CoordEvent::CheckpointRequested)?;
    dispatch(coord, agents, actions, &mut outcome)?;
    settle(coord, agents, &mut outcome)?;
    match outcome {
        Some(Ok(g)) => Ok(g),
        Some(Err(AbortReason::Timeout)) => Err(RoundError::Timeout),
        Some(Err(reason)) => Err(RoundError::RoundAborted(reason)),
        None => Err(ProtoError::violation("round settled without an outcome").into()),
    }
}
