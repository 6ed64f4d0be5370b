//! Loopback TCP transport for daemon mode.
//!
//! One coordinator thread owns the state machine. Each connection has a
//! reader thread that forwards decoded frames over a channel. A connection
//! whose HELLO carries [`CONTROL_AGENT_ID`] is a control client; it may
//! ask for a checkpoint (CKPT_REQUEST), a restart (RESTART_INFO with a
//! `restore` payload) or a status line (its HELLO is answered with one).

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use super::round::{AgentHost, Coordinator, RoundError};
use super::{decode_frame, encode_frame, CkptFrame, CoordAction, CoordEvent, Decoded, FrameError, MsgType, StateFile};
use crate::imgstore::ImageStore;
use crate::jobrt::JobState;

pub const CONTROL_AGENT_ID: u32 = u32::MAX;
pub const DEFAULT_ROUND_TIMEOUT: Duration = Duration::from_secs(30);
const RESTORE_TAG: &str = "restore";
const POLL: Duration = Duration::from_millis(10);

#[derive(Debug, Error)]
pub enum NetError {
    #[error("endpoint {0} is already in use")]
    EndpointBusy(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Round(#[from] RoundError),
    #[error("connection closed by peer")]
    Closed,
    #[error("timed out waiting for a reply")]
    TimedOut,
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("unexpected reply {0:?}")]
    UnexpectedReply(MsgType),
}

/// Blocking framed stream.
#[derive(Debug)]
pub struct FrameStream {
    stream: TcpStream,
    buf: Vec<u8>,
}

impl FrameStream {
    pub fn new(stream: TcpStream) -> Self {
        Self { stream, buf: Vec::new() }
    }

    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let s = TcpStream::connect(addr)?;
        s.set_nodelay(true)?;
        Ok(Self::new(s))
    }

    pub fn send(&mut self, f: &CkptFrame) -> Result<(), NetError> {
        self.stream.write_all(&encode_frame(f)?)?;
        Ok(())
    }

    /// Next frame; `Ok(None)` once the peer closes.
    pub fn recv(&mut self) -> Result<Option<CkptFrame>, NetError> {
        self.recv_within(None)
    }

    /// Like [`recv`](Self::recv) but gives up with [`NetError::TimedOut`].
    pub fn recv_within(&mut self, timeout: Option<Duration>) -> Result<Option<CkptFrame>, NetError> {
        self.stream.set_read_timeout(timeout)?;
        let mut chunk = [0u8; 4096];
        loop {
            if let Decoded::Frame { frame, consumed } = decode_frame(&self.buf)? {
                self.buf.drain(..consumed);
                return Ok(Some(frame));
            }
            match self.stream.read(&mut chunk) {
                Ok(0) => return Ok(None),
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    return Err(NetError::TimedOut)
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub round_timeout: Duration,
    pub state_file: Option<StateFile>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { round_timeout: DEFAULT_ROUND_TIMEOUT, state_file: None }
    }
}

enum Msg {
    Frame(u64, CkptFrame),
    Closed(u64),
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Role {
    Unknown,
    Agent(u32),
    Control,
}

struct Conn {
    stream: TcpStream,
    role: Role,
}

struct Round {
    generation: u32,
    deadline: Instant,
    requester: Option<u64>,
}

struct Restart {
    requester: u64,
    pending: BTreeSet<u32>,
    loaded: u32,
    deadline: Instant,
}

struct Server {
    coord: Coordinator,
    cfg: ServerConfig,
    conns: BTreeMap<u64, Conn>,
    round: Option<Round>,
    restart: Option<Restart>,
}

impl Server {
    fn write(&mut self, conn: u64, f: &CkptFrame) {
        let Ok(bytes) = encode_frame(f) else { return };
        if let Some(c) = self.conns.get_mut(&conn) {
            if c.stream.write_all(&bytes).is_err() {
                let _ = c.stream.shutdown(Shutdown::Both);
            }
        }
    }

    fn agent_conn(&self, agent: u32) -> Option<u64> {
        self.conns.iter().find(|(_, c)| c.role == Role::Agent(agent)).map(|(id, _)| *id)
    }

    fn agent_conns(&self) -> Vec<(u64, u32)> {
        self.conns
            .iter()
            .filter_map(|(id, c)| match c.role {
                Role::Agent(a) => Some((*id, a)),
                _ => None,
            })
            .collect()
    }

    fn status_line(&self) -> String {
        let s = self.coord.state();
        let agents: Vec<String> = s.connected_agents.iter().map(u32::to_string).collect();
        format!("committed_generation={} phase={:?} agents={}", s.committed_generation, s.phase, agents.join(","))
    }

    fn apply(&mut self, e: CoordEvent) {
        let actions = match self.coord.apply(&e) {
            Ok(a) => a,
            Err(err) => {
                log::warn!("coordinator: {err}");
                if let (RoundError::Persist(_), Some(r)) = (&err, self.round.take()) {
                    let nack = CkptFrame::new(MsgType::Nack, r.generation, CONTROL_AGENT_ID)
                        .with_payload(err.to_string().into_bytes());
                    for (conn, a) in self.agent_conns() {
                        self.write(conn, &CkptFrame { agent_id: a, ..nack.clone() });
                    }
                    if let Some(req) = r.requester {
                        self.write(req, &nack);
                    }
                }
                return;
            }
        };
        for a in actions {
            match a {
                CoordAction::SendToAgent(id, f) => {
                    if let Some(c) = self.agent_conn(id) {
                        self.write(c, &f);
                    }
                }
                CoordAction::BroadcastCkptRequest(g) => {
                    let pending = self.coord.state().pending_acks.clone();
                    let attempt = self.coord.state().round_attempt;
                    for (conn, a) in self.agent_conns() {
                        if pending.contains(&a) {
                            self.write(conn, &CkptFrame::new(MsgType::CkptRequest, g, a).with_attempt(attempt, &[]));
                        }
                    }
                    if let Some(r) = self.round.as_mut() {
                        r.generation = g;
                    }
                }
                CoordAction::CommitGeneration(g) => {
                    log::info!("committed generation {g}");
                    for (conn, a) in self.agent_conns() {
                        self.write(conn, &CkptFrame::new(MsgType::Commit, g, a));
                    }
                    if let Some(req) = self.round.take().and_then(|r| r.requester) {
                        self.write(req, &CkptFrame::new(MsgType::Commit, g, CONTROL_AGENT_ID));
                    }
                }
                CoordAction::AbortRound { generation, reason } => {
                    log::warn!("round {generation} aborted: {reason}");
                    let text = reason.to_string().into_bytes();
                    for (conn, a) in self.agent_conns() {
                        self.write(conn, &CkptFrame::new(MsgType::Nack, generation, a).with_payload(text.clone()));
                    }
                    if let Some(req) = self.round.take().and_then(|r| r.requester) {
                        self.write(
                            req,
                            &CkptFrame::new(MsgType::Nack, generation, CONTROL_AGENT_ID).with_payload(text),
                        );
                    }
                }
            }
        }
    }

    fn finish_restart(&mut self, ok: bool, reason: &str) {
        if let Some(r) = self.restart.take() {
            let f = if ok {
                CkptFrame::new(MsgType::RestartInfo, r.loaded, CONTROL_AGENT_ID)
            } else {
                CkptFrame::new(MsgType::Nack, r.loaded, CONTROL_AGENT_ID).with_payload(reason.as_bytes().to_vec())
            };
            self.write(r.requester, &f);
        }
    }

    fn control(&mut self, conn: u64, f: CkptFrame) {
        let busy = self.round.is_some() || self.restart.is_some();
        match f.msg_type {
            MsgType::Hello => {
                let status = self.status_line();
                let g = self.coord.committed_generation();
                self.write(
                    conn,
                    &CkptFrame::new(MsgType::RestartInfo, g, CONTROL_AGENT_ID).with_payload(status.into_bytes()),
                );
            }
            MsgType::CkptRequest if busy => {
                self.write(conn, &CkptFrame::new(MsgType::Nack, 0, CONTROL_AGENT_ID).with_payload(b"busy".to_vec()));
            }
            MsgType::CkptRequest => {
                self.round = Some(Round {
                    generation: self.coord.committed_generation() + 1,
                    deadline: Instant::now() + self.cfg.round_timeout,
                    requester: Some(conn),
                });
                self.apply(CoordEvent::CheckpointRequested);
            }
            MsgType::RestartInfo if busy => {
                self.write(conn, &CkptFrame::new(MsgType::Nack, 0, CONTROL_AGENT_ID).with_payload(b"busy".to_vec()));
            }
            MsgType::RestartInfo => {
                let agents = self.agent_conns();
                self.restart = Some(Restart {
                    requester: conn,
                    pending: agents.iter().map(|(_, a)| *a).collect(),
                    loaded: f.generation,
                    deadline: Instant::now() + self.cfg.round_timeout,
                });
                if agents.is_empty() {
                    self.finish_restart(false, "no agents connected");
                    return;
                }
                for (c, a) in agents {
                    let req = CkptFrame::new(MsgType::RestartInfo, f.generation, a)
                        .with_payload(RESTORE_TAG.as_bytes().to_vec());
                    self.write(c, &req);
                }
            }
            other => {
                self.write(
                    conn,
                    &CkptFrame::new(MsgType::Nack, 0, CONTROL_AGENT_ID)
                        .with_payload(format!("unsupported control request {other:?}").into_bytes()),
                );
            }
        }
    }

    fn agent_restart_reply(&mut self, agent: u32, f: &CkptFrame) {
        let Some(r) = self.restart.as_mut() else { return };
        if !r.pending.remove(&agent) {
            return;
        }
        if f.msg_type == MsgType::Nack {
            let reason = format!("agent {agent}: {}", f.payload_text());
            self.finish_restart(false, &reason);
            return;
        }
        r.loaded = f.generation;
        if r.pending.is_empty() {
            self.finish_restart(true, "");
        }
    }

    fn on_frame(&mut self, conn: u64, f: CkptFrame) {
        let role = match self.conns.get(&conn) {
            Some(c) => c.role,
            None => return,
        };
        match (role, f.msg_type) {
            (Role::Unknown, MsgType::Hello) if f.agent_id == CONTROL_AGENT_ID => {
                self.conns.get_mut(&conn).expect("conn").role = Role::Control;
                self.control(conn, f);
            }
            (Role::Unknown, MsgType::Hello) => {
                if self.coord.state().connected_agents.contains(&f.agent_id) {
                    self.write(
                        conn,
                        &CkptFrame::new(MsgType::Nack, 0, f.agent_id).with_payload(b"duplicate agent id".to_vec()),
                    );
                    self.close(conn);
                    return;
                }
                self.conns.get_mut(&conn).expect("conn").role = Role::Agent(f.agent_id);
                self.apply(CoordEvent::AgentConnected(f.agent_id));
            }
            (Role::Control, _) => self.control(conn, f),
            (Role::Agent(_), MsgType::Ack | MsgType::Nack)
                if self.restart.is_none() && self.coord.state().is_stale_answer(f.generation, f.attempt()) =>
            {
                log::debug!("dropping stale {:?} for generation {}", f.msg_type, f.generation)
            }
            (Role::Agent(a), MsgType::Ack) => self.apply(CoordEvent::Ack { agent: a, generation: f.generation }),
            (Role::Agent(a), MsgType::Nack) if self.restart.as_ref().is_some_and(|r| r.pending.contains(&a)) => {
                self.agent_restart_reply(a, &f)
            }
            (Role::Agent(a), MsgType::Nack) => {
                self.apply(CoordEvent::Nack { agent: a, generation: f.generation, reason: f.text_after_attempt() })
            }
            (Role::Agent(a), MsgType::RestartInfo) => self.agent_restart_reply(a, &f),
            (_, t) => {
                log::warn!("dropping connection {conn}: unexpected {t:?}");
                self.close(conn);
            }
        }
    }

    fn close(&mut self, conn: u64) {
        let Some(c) = self.conns.remove(&conn) else { return };
        let _ = c.stream.shutdown(Shutdown::Both);
        match c.role {
            Role::Agent(a) => {
                if let Some(r) = self.restart.as_mut() {
                    if r.pending.remove(&a) {
                        self.finish_restart(false, &format!("agent {a} disconnected"));
                    }
                }
                self.apply(CoordEvent::AgentDisconnected(a));
            }
            Role::Control => {
                if let Some(r) = self.round.as_mut().filter(|r| r.requester == Some(conn)) {
                    r.requester = None;
                }
            }
            Role::Unknown => {}
        }
    }

    fn check_deadlines(&mut self) {
        let now = Instant::now();
        if let Some(g) = self.round.as_ref().filter(|r| now >= r.deadline).map(|r| r.generation) {
            self.apply(CoordEvent::RoundTimedOut { generation: g });
            self.round = None;
        }
        if self.restart.as_ref().is_some_and(|r| now >= r.deadline) {
            self.finish_restart(false, "restart timed out");
        }
    }
}

fn spawn_reader(conn: u64, stream: TcpStream, tx: Sender<Msg>) {
    thread::spawn(move || {
        let mut fs = FrameStream::new(stream);
        while let Ok(Some(f)) = fs.recv() {
            if tx.send(Msg::Frame(conn, f)).is_err() {
                return;
            }
        }
        let _ = tx.send(Msg::Closed(conn));
    });
}

/// A running coordinator daemon.
#[derive(Debug)]
pub struct CoordinatorServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl CoordinatorServer {
    /// Bind `addr` and start serving. Port 0 picks a free port.
    pub fn bind(addr: &str, cfg: ServerConfig) -> Result<Self, NetError> {
        let listener = TcpListener::bind(addr).map_err(|e| match e.kind() {
            io::ErrorKind::AddrInUse => NetError::EndpointBusy(addr.to_string()),
            _ => NetError::Io(e),
        })?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let coord = Coordinator::start(cfg.state_file.clone())?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = thread::spawn(move || {
            let server = Server { coord, cfg, conns: BTreeMap::new(), round: None, restart: None };
            serve(listener, server, &flag);
        });
        Ok(Self { addr: local, stop, handle: Some(handle) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for CoordinatorServer {
    fn drop(&mut self) {
        self.stop_now();
    }
}

fn serve(listener: TcpListener, mut server: Server, stop: &AtomicBool) {
    let (tx, rx): (Sender<Msg>, Receiver<Msg>) = mpsc::channel();
    let mut next_conn = 0u64;
    while !stop.load(Ordering::SeqCst) {
        loop {
            match listener.accept() {
                Ok((stream, _)) => {
                    let Ok(reader) = stream.try_clone() else { continue };
                    let _ = stream.set_nonblocking(false);
                    let _ = stream.set_nodelay(true);
                    next_conn += 1;
                    server.conns.insert(next_conn, Conn { stream, role: Role::Unknown });
                    spawn_reader(next_conn, reader, tx.clone());
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    break;
                }
            }
        }
        match rx.recv_timeout(POLL) {
            Ok(Msg::Frame(c, f)) => server.on_frame(c, f),
            Ok(Msg::Closed(c)) => server.close(c),
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => {}
        }
        server.check_deadlines();
    }
    for c in server.conns.values() {
        let _ = c.stream.shutdown(Shutdown::Both);
    }
}

/// Job agent running in its own thread: one step per `step_interval`,
/// serving protocol frames between steps.
#[derive(Debug)]
pub struct AgentWorker {
    stop: Arc<AtomicBool>,
    handle: JoinHandle<Result<JobState, NetError>>,
}

impl AgentWorker {
    /// Connect to the coordinator at `addr` and start stepping `job`.
    /// The worker exits on its own once the job completes.
    pub fn spawn(
        addr: SocketAddr,
        agent_id: u32,
        job: JobState,
        store: ImageStore,
        step_interval: Duration,
    ) -> Result<Self, NetError> {
        let mut fs = FrameStream::connect(addr)?;
        let mut host = AgentHost::new(agent_id, job, store);
        fs.send(&CkptFrame::new(MsgType::Hello, 0, agent_id))?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle =
            thread::spawn(move || agent_loop(&mut fs, &mut host, step_interval, &flag).map(|_| host.into_job()));
        Ok(Self { stop, handle })
    }

    pub fn is_finished(&self) -> bool {
        self.handle.is_finished()
    }

    /// Stop stepping and hand back the job state.
    pub fn stop(self) -> Result<JobState, NetError> {
        self.stop.store(true, Ordering::SeqCst);
        self.join()
    }

    pub fn join(self) -> Result<JobState, NetError> {
        self.handle.join().map_err(|_| NetError::Io(io::Error::other("agent thread panicked")))?
    }
}

fn agent_loop(fs: &mut FrameStream, host: &mut AgentHost, step: Duration, stop: &AtomicBool) -> Result<(), NetError> {
    let started = Instant::now();
    let mut next_step = started + step;
    while !stop.load(Ordering::SeqCst) {
        let wait = next_step.saturating_duration_since(Instant::now()).max(Duration::from_millis(1));
        match fs.recv_within(Some(wait)) {
            Ok(Some(f)) => {
                host.set_virtual_time(started.elapsed().as_secs());
                if f.msg_type == MsgType::RestartInfo && f.payload_text() == RESTORE_TAG {
                    let want = (f.generation != 0).then_some(f.generation);
                    let reply = match host.restart_from(want) {
                        Ok(g) => CkptFrame::new(MsgType::RestartInfo, g, host.agent_id()),
                        Err(e) => CkptFrame::new(MsgType::Nack, f.generation, host.agent_id())
                            .with_payload(e.to_string().into_bytes()),
                    };
                    fs.send(&reply)?;
                    continue;
                }
                if f.msg_type == MsgType::Nack && f.generation == 0 {
                    return Err(NetError::Rejected(f.payload_text()));
                }
                host.link_mut().send_to_agent(&f)?;
                host.pump()?;
                while let Some(out) = host.link_mut().recv_from_agent()? {
                    fs.send(&out)?;
                }
            }
            Ok(None) => return Err(NetError::Closed),
            Err(NetError::TimedOut) => {}
            Err(e) => return Err(e),
        }
        if Instant::now() >= next_step {
            next_step += step;
            if host.job().is_completed() {
                return Ok(());
            }
            host.job_mut().advance().map_err(RoundError::from)?;
            if host.job().is_completed() {
                return Ok(());
            }
        }
    }
    Ok(())
}

fn control_exchange(addr: SocketAddr, req: Option<CkptFrame>, timeout: Duration) -> Result<CkptFrame, NetError> {
    let mut fs = FrameStream::connect(addr)?;
    fs.send(&CkptFrame::new(MsgType::Hello, 0, CONTROL_AGENT_ID))?;
    let status = fs.recv_within(Some(timeout))?.ok_or(NetError::Closed)?;
    let Some(req) = req else { return Ok(status) };
    fs.send(&req)?;
    fs.recv_within(Some(timeout))?.ok_or(NetError::Closed)
}

/// Ask the coordinator for a checkpoint round; returns the committed
/// generation.
pub fn request_checkpoint(addr: SocketAddr, timeout: Duration) -> Result<u32, NetError> {
    let reply = control_exchange(addr, Some(CkptFrame::new(MsgType::CkptRequest, 0, CONTROL_AGENT_ID)), timeout)?;
    match reply.msg_type {
        MsgType::Commit => Ok(reply.generation),
        MsgType::Nack => Err(NetError::Rejected(reply.payload_text())),
        t => Err(NetError::UnexpectedReply(t)),
    }
}

/// Restore every agent from `generation`, or the newest image when
/// `None`. Returns the generation loaded.
pub fn request_restart(addr: SocketAddr, generation: Option<u32>, timeout: Duration) -> Result<u32, NetError> {
    let req = CkptFrame::new(MsgType::RestartInfo, generation.unwrap_or(0), CONTROL_AGENT_ID)
        .with_payload(RESTORE_TAG.as_bytes().to_vec());
    let reply = control_exchange(addr, Some(req), timeout)?;
    match reply.msg_type {
        MsgType::RestartInfo => Ok(reply.generation),
        MsgType::Nack => Err(NetError::Rejected(reply.payload_text())),
        t => Err(NetError::UnexpectedReply(t)),
    }
}

/// One-line coordinator status.
pub fn request_status(addr: SocketAddr, timeout: Duration) -> Result<String, NetError> {
    Ok(control_exchange(addr, None, timeout)?.payload_text())
}
