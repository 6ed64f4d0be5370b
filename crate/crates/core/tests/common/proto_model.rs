//! Model of the checkpoint protocol over FIFO links, with agent loss,
//! write failures, timeouts and coordinator crashes. Drives the pure
//! state machines and checks the safety properties after every move.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use ckpt_core::imgstore::ImageStore;
use ckpt_core::jobrt::{JobSpec, JobState, WorkloadKind};
use ckpt_core::proto::{
    connect_agents, run_checkpoint_round, AgentAction, AgentEvent, AgentHost, AgentPhase, AgentState, CkptFrame,
    CoordAction, CoordEvent, CoordPhase, Coordinator, CoordinatorState, MsgType, StateFile,
};

#[derive(Debug, Clone)]
enum Msg {
    Hello,
    Req { g: u32, attempt: u32 },
    Abort { g: u32 },
    Commit,
    Restart { c: u32 },
    Ack { g: u32, attempt: u32 },
    Nack { g: u32, attempt: u32 },
}

struct Agent {
    st: AgentState,
    attempt: u32,
    images: BTreeSet<u32>,
    internal: VecDeque<AgentEvent>,
    connected: bool,
    to_agent: VecDeque<Msg>,
    to_coord: VecDeque<Msg>,
}

#[derive(Default)]
struct Round {
    participants: BTreeSet<u32>,
    acked: BTreeSet<u32>,
}

struct World {
    rng: StdRng,
    coord: CoordinatorState,
    persisted: u32,
    agents: Vec<Agent>,
    rounds: BTreeMap<(u32, u32), Round>,
    /// Participants of the round that produced the latest commit.
    last_commit: Option<(u32, BTreeSet<u32>)>,
    epoch: u32,
    fail_pct: u32,
    commits: u64,
    aborts: u64,
}

impl World {
    fn new(seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let n = rng.gen_range(1..=5);
        let fail_pct = rng.gen_range(0..30);
        let agents = (0..n)
            .map(|i| Agent {
                st: AgentState::new(i),
                attempt: 0,
                images: BTreeSet::new(),
                internal: VecDeque::new(),
                connected: true,
                to_agent: VecDeque::new(),
                to_coord: VecDeque::from([Msg::Hello]),
            })
            .collect();
        World {
            rng,
            coord: CoordinatorState::recovered(0),
            persisted: 0,
            agents,
            rounds: BTreeMap::new(),
            last_commit: None,
            epoch: 0,
            fail_pct,
            commits: 0,
            aborts: 0,
        }
    }

    fn coord_apply(&mut self, e: CoordEvent) {
        let before = self.coord.committed_generation;
        let (next, actions) = self.coord.step(&e).unwrap_or_else(|err| panic!("coordinator rejected {e:?}: {err}"));
        assert!(next.committed_generation >= before, "committed generation went backwards");
        next.check_invariants().unwrap();
        self.coord = next;
        for a in actions {
            match a {
                CoordAction::SendToAgent(id, f) => {
                    assert_eq!(f.msg_type, MsgType::RestartInfo);
                    self.agents[id as usize].to_agent.push_back(Msg::Restart { c: f.generation });
                }
                CoordAction::BroadcastCkptRequest(g) => {
                    let attempt = self.coord.round_attempt;
                    let participants = self.coord.pending_acks.clone();
                    for &p in &participants {
                        self.agents[p as usize].to_agent.push_back(Msg::Req { g, attempt });
                    }
                    let prev = self.rounds.insert((self.epoch, attempt), Round { participants, ..Round::default() });
                    assert!(prev.is_none(), "attempt number reused");
                }
                CoordAction::CommitGeneration(g) => {
                    // persisted before anyone hears about it
                    assert_eq!(g, self.persisted + 1, "commit skipped a generation");
                    let round = &self.rounds[&(self.epoch, self.coord.round_attempt)];
                    for p in &round.participants {
                        assert!(round.acked.contains(p), "commit of {g} without ack from {p}");
                        assert!(
                            self.agents[*p as usize].images.contains(&g),
                            "commit of {g} but agent {p} has no image"
                        );
                    }
                    self.last_commit = Some((g, round.participants.clone()));
                    self.persisted = g;
                    self.commits += 1;
                    for a in self.agents.iter_mut().filter(|a| a.connected) {
                        a.to_agent.push_back(Msg::Commit);
                    }
                }
                CoordAction::AbortRound { generation, .. } => {
                    assert_eq!(self.coord.committed_generation, self.persisted, "abort changed the commit");
                    assert_eq!(generation, self.persisted + 1);
                    self.aborts += 1;
                    for a in self.agents.iter_mut().filter(|a| a.connected) {
                        a.to_agent.push_back(Msg::Abort { g: generation });
                    }
                }
            }
        }
    }

    fn agent_feed(&mut self, i: usize, e: AgentEvent) {
        let a = &mut self.agents[i];
        let (next, actions) = a.st.step(&e).unwrap_or_else(|err| panic!("agent {i} rejected {e:?}: {err}"));
        a.st = next;
        for act in actions {
            match act {
                AgentAction::CaptureSnapshot(g) => a.internal.push_back(AgentEvent::SnapshotTaken(g)),
                AgentAction::WriteImage(g) => {
                    if self.rng.gen_range(0..100) < self.fail_pct {
                        a.internal.push_back(AgentEvent::ImageWriteFailed(g, "disk-full".into()));
                    } else {
                        a.images.insert(g);
                        a.internal.push_back(AgentEvent::ImageWritten(g));
                    }
                }
                AgentAction::SendAck(g) if a.connected => a.to_coord.push_back(Msg::Ack { g, attempt: a.attempt }),
                AgentAction::SendNack(g, _) if a.connected => a.to_coord.push_back(Msg::Nack { g, attempt: a.attempt }),
                _ => {}
            }
        }
    }

    /// Local abandonment of any round in progress, as on a lost connection.
    fn agent_abandon(&mut self, i: usize) {
        let a = &mut self.agents[i];
        a.internal.clear();
        if a.st.phase != AgentPhase::Running {
            let g = a.st.target_generation.expect("mid-round agent has a target");
            self.agent_feed(i, AgentEvent::RoundAborted(g));
        }
    }

    fn deliver_to_agent(&mut self, i: usize) {
        let Some(m) = self.agents[i].to_agent.pop_front() else { return };
        match m {
            Msg::Req { g, attempt } => {
                self.agents[i].attempt = attempt;
                self.agent_feed(i, AgentEvent::CkptRequest(g));
                self.agents[i].internal.push_back(AgentEvent::StepBoundaryReached);
            }
            Msg::Abort { g } => {
                self.agents[i].internal.clear();
                self.agent_feed(i, AgentEvent::RoundAborted(g));
                self.agents[i].images.retain(|&x| x < g);
            }
            Msg::Restart { c } => {
                if self.agents[i].st.last_written_generation > c {
                    self.agent_abandon(i);
                    if self.agents[i].st.last_written_generation > c {
                        self.agent_feed(i, AgentEvent::RoundAborted(c + 1));
                    }
                }
                self.agents[i].images.retain(|&x| x <= c);
            }
            Msg::Commit => {}
            other => panic!("agent got {other:?}"),
        }
    }

    fn deliver_to_coord(&mut self, i: usize) {
        let Some(m) = self.agents[i].to_coord.pop_front() else { return };
        let id = i as u32;
        match m {
            Msg::Hello => self.coord_apply(CoordEvent::AgentConnected(id)),
            Msg::Ack { g, attempt } | Msg::Nack { g, attempt } if self.coord.is_stale_answer(g, Some(attempt)) => {}
            Msg::Ack { g, attempt } => {
                if let Some(r) = self.rounds.get_mut(&(self.epoch, attempt)) {
                    r.acked.insert(id);
                }
                self.coord_apply(CoordEvent::Ack { agent: id, generation: g });
            }
            Msg::Nack { g, .. } => {
                self.coord_apply(CoordEvent::Nack { agent: id, generation: g, reason: "disk-full".into() })
            }
            other => panic!("coordinator got {other:?}"),
        }
    }

    fn disconnect(&mut self, i: usize) {
        if !self.agents[i].connected {
            return;
        }
        let a = &mut self.agents[i];
        a.connected = false;
        a.to_agent.clear();
        a.to_coord.clear();
        self.agent_abandon(i);
        if self.coord.connected_agents.contains(&(i as u32)) {
            self.coord_apply(CoordEvent::AgentDisconnected(i as u32));
        }
    }

    fn reconnect(&mut self, i: usize) {
        let a = &mut self.agents[i];
        if !a.connected {
            a.connected = true;
            a.to_coord.push_back(Msg::Hello);
        }
    }

    fn crash_coordinator(&mut self) {
        self.coord = CoordinatorState::recovered(self.persisted);
        self.epoch += 1;
        for i in 0..self.agents.len() {
            let was = self.agents[i].connected;
            self.agents[i].connected = false;
            self.agents[i].to_agent.clear();
            self.agents[i].to_coord.clear();
            self.agent_abandon(i);
            if was {
                self.reconnect(i);
            }
        }
    }

    fn request(&mut self) {
        if self.coord.phase == CoordPhase::Collecting {
            // single round in flight
            assert!(self.coord.step(&CoordEvent::CheckpointRequested).is_err());
        } else {
            self.coord_apply(CoordEvent::CheckpointRequested);
        }
    }

    fn random_step(&mut self) {
        let n = self.agents.len();
        let i = self.rng.gen_range(0..n);
        match self.rng.gen_range(0..100) {
            0..=9 => self.request(),
            10..=34 => self.deliver_to_agent(i),
            35..=59 => self.deliver_to_coord(i),
            60..=84 => {
                if let Some(e) = self.agents[i].internal.pop_front() {
                    self.agent_feed(i, e);
                }
            }
            85..=88 => self.disconnect(i),
            89..=93 => self.reconnect(i),
            94..=96 => {
                let g = if self.rng.gen_bool(0.5) { self.coord.round_generation } else { self.rng.gen_range(0..5) };
                self.coord_apply(CoordEvent::RoundTimedOut { generation: g });
            }
            _ => self.crash_coordinator(),
        }
    }

    fn busy(&self) -> bool {
        self.agents.iter().any(|a| !a.to_agent.is_empty() || !a.to_coord.is_empty() || !a.internal.is_empty())
    }

    fn drain(&mut self) {
        for i in 0..self.agents.len() {
            self.reconnect(i);
        }
        let mut guard = 0;
        while self.busy() {
            guard += 1;
            assert!(guard < 100_000, "no quiescence");
            for i in 0..self.agents.len() {
                self.deliver_to_coord(i);
                self.deliver_to_agent(i);
                if let Some(e) = self.agents[i].internal.pop_front() {
                    self.agent_feed(i, e);
                }
            }
        }
        if self.coord.phase == CoordPhase::Collecting {
            self.coord_apply(CoordEvent::RoundTimedOut { generation: self.coord.round_generation });
            self.drain();
        }
    }

    fn check_final(&self) {
        assert_eq!(self.coord.committed_generation, self.persisted);
        for (i, a) in self.agents.iter().enumerate() {
            assert!(a.images.iter().all(|&g| g <= self.persisted), "agent {i} keeps uncommitted image: {:?}", a.images);
            assert_eq!(a.st.phase, AgentPhase::Running);
        }
        if let Some((g, parts)) = &self.last_commit {
            for p in parts {
                assert!(self.agents[*p as usize].images.contains(g), "agent {p} lost committed image {g}");
            }
        }
    }
}

/// One random history of `steps` moves, drained and checked. Returns
/// (commits, aborts).
pub fn run_interleaving(seed: u64, steps: usize) -> (u64, u64) {
    let mut w = World::new(seed);
    for _ in 0..steps {
        w.random_step();
    }
    w.drain();
    w.check_final();
    // after any history the next round commits committed + 1
    let before = w.persisted;
    w.request();
    w.fail_pct = 0;
    w.drain();
    assert_eq!(w.persisted, before + 1, "seed {seed}");
    w.check_final();
    (w.commits, w.aborts)
}

fn host(dir: &std::path::Path, id: u32) -> AgentHost {
    let spec = JobSpec::new(100 + u64::from(id), WorkloadKind::PrngDigest, 1_000, u64::from(id), 1);
    AgentHost::new(id, JobState::launch(spec).unwrap(), ImageStore::new(dir.join("img")))
}

/// Kill the coordinator mid-round after a random history of rounds, then
/// check recovery keeps the committed generation and the next round
/// commits committed + 1.
pub fn kill_restart_cases(n: usize, seed: u64) {
    let mut rng = StdRng::seed_from_u64(seed);
    for case in 0..n {
        let d = tempfile::tempdir().unwrap();
        let state = StateFile::new(d.path().join("coord.state"));
        let n = rng.gen_range(1..=5);
        let mut agents: Vec<AgentHost> = (0..n).map(|i| host(d.path(), i)).collect();
        let mut coord = Coordinator::start(Some(state.clone())).unwrap();
        connect_agents(&mut coord, &mut agents).unwrap();
        let mut committed = 0;
        for vt in 0..rng.gen_range(1..6) {
            for a in agents.iter_mut() {
                a.job_mut().advance().unwrap();
            }
            if rng.gen_bool(0.3) {
                let k = rng.gen_range(0..n as usize);
                agents[k].faults.fail_next_writes = 1;
            }
            match run_checkpoint_round(&mut coord, &mut agents, vt) {
                Ok(g) => {
                    assert_eq!(g, committed + 1);
                    committed = g;
                }
                Err(e) => assert!(e.is_abort(), "{e}"),
            }
        }
        // kill mid-round: a request is broadcast, some agents answer,
        // then the coordinator dies before collecting the rest
        let mut doomed = Coordinator::start(Some(state.clone())).unwrap();
        connect_agents(&mut doomed, &mut agents).unwrap();
        doomed.apply(&CoordEvent::CheckpointRequested).unwrap();
        for a in agents.iter_mut() {
            let f = CkptFrame::new(MsgType::CkptRequest, committed + 1, a.agent_id())
                .with_attempt(doomed.state().round_attempt, &[]);
            if rng.gen_bool(0.5) {
                a.link_mut().send_to_agent(&f).unwrap();
                a.pump().unwrap();
            }
        }
        drop(doomed);
        assert_eq!(state.load().unwrap(), committed, "case {case}");

        let mut coord = Coordinator::start(Some(state.clone())).unwrap();
        assert_eq!(coord.committed_generation(), committed);
        connect_agents(&mut coord, &mut agents).unwrap();
        for a in &agents {
            let gens = a.store().generations(a.job().job_id()).unwrap();
            assert!(gens.iter().all(|&g| g <= committed), "uncommitted image survived reconnect: {gens:?}");
            if committed > 0 {
                assert!(gens.contains(&committed));
            }
        }
        let g = run_checkpoint_round(&mut coord, &mut agents, 99).unwrap();
        assert_eq!(g, committed + 1);
        assert_eq!(state.load().unwrap(), committed + 1);
    }
}
