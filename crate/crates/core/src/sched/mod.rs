//! Discrete-event batch scheduler: FIFO queue with conservative backfill,
//! walltime-limited allocations, preemption notices and requeue.
//!
//! Events at one instant are processed in a fixed order: completions,
//! driver requeues, window expiries, notices, then scheduling passes until
//! nothing more starts.

mod plan;

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::timefmt::format_comment;
use plan::Profile;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchedError {
    #[error("job {0} already submitted")]
    DuplicateJobId(u64),
    #[error("unknown job {0}")]
    UnknownJob(u64),
    #[error("job {0} holds no allocation")]
    NotRunning(u64),
    #[error("job {job_id}: consuming {consumed} of remaining {remaining} exhausts its walltime")]
    ExhaustedWalltime { job_id: u64, remaining: u64, consumed: u64 },
    #[error("invalid job: {0}")]
    BadJob(String),
    #[error("invalid cluster config: {0}")]
    BadConfig(String),
    #[error("job {job_id}: time {at} is {reason}")]
    BadTime { job_id: u64, at: u64, reason: &'static str },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterConfig {
    pub nodes: usize,
    pub signal_lead: u64,
    pub requeue_delay: u64,
    pub backfill: bool,
    /// Seconds per tick, used for the comment field.
    pub tick_seconds: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { nodes: 1, signal_lead: 5, requeue_delay: 0, backfill: true, tick_seconds: 60 }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), SchedError> {
        if self.nodes == 0 {
            return Err(SchedError::BadConfig("nodes must be ≥ 1".into()));
        }
        if self.signal_lead == 0 {
            return Err(SchedError::BadConfig("signal_lead must be ≥ 1".into()));
        }
        if self.tick_seconds == 0 {
            return Err(SchedError::BadConfig("tick_seconds must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueuedJob {
    pub job_id: u64,
    pub nodes_needed: usize,
    pub requested_walltime: u64,
    pub remaining_walltime: u64,
    /// Longest single allocation the queue grants.
    pub window: u64,
    /// Actual run time still needed, if known to the simulator. Jobs
    /// without it end only through the driver.
    pub work: Option<u64>,
    pub comment: String,
    pub priority_rank: u64,
}

impl QueuedJob {
    pub fn new(job_id: u64, nodes_needed: usize, requested_walltime: u64, window: u64) -> Self {
        Self {
            job_id,
            nodes_needed,
            requested_walltime,
            remaining_walltime: requested_walltime,
            window,
            work: None,
            comment: format_comment(0),
            priority_rank: 0,
        }
    }

    pub fn with_work(mut self, ticks: u64) -> Self {
        self.work = Some(ticks);
        self
    }

    /// Length of the next allocation.
    pub fn limit(&self) -> u64 {
        self.window.min(self.remaining_walltime)
    }

    fn validate(&self) -> Result<(), SchedError> {
        let bad = |m: &str| Err(SchedError::BadJob(format!("job {}: {m}", self.job_id)));
        if self.nodes_needed == 0 {
            return bad("nodes_needed must be ≥ 1");
        }
        if self.window == 0 {
            return bad("window must be ≥ 1");
        }
        if self.remaining_walltime == 0 || self.remaining_walltime > self.requested_walltime {
            return bad("remaining walltime must be in 1..=requested");
        }
        if self.work == Some(0) {
            return bad("work must be ≥ 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    pub job_id: u64,
    pub node_ids: Vec<usize>,
    pub start: u64,
    pub limit: u64,
    pub notice_at: u64,
}

impl Allocation {
    pub fn end(&self) -> u64 {
        self.start + self.limit
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    JobStarted,
    PreemptNotice,
    WindowExpired,
    JobCompleted,
    JobRequeued,
    /// Window expired with no walltime left.
    TimedOut,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::JobStarted => "JobStarted",
            Self::PreemptNotice => "PreemptNotice",
            Self::WindowExpired => "WindowExpired",
            Self::JobCompleted => "JobCompleted",
            Self::JobRequeued => "JobRequeued",
            Self::TimedOut => "TimedOut",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterEvent {
    pub at: u64,
    pub kind: EventKind,
    pub job_id: u64,
    pub node_ids: Vec<usize>,
}

impl fmt::Display for ClusterEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes: Vec<String> = self.node_ids.iter().map(usize::to_string).collect();
        write!(f, "t={} kind={} job={} nodes={}", self.at, self.kind.name(), self.job_id, nodes.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobStatus {
    Queued,
    Running,
    Completed,
    TimedOut,
    /// Needs more nodes than the cluster has.
    Starved,
}

/// One closed allocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocationRecord {
    pub job_id: u64,
    pub node_ids: Vec<usize>,
    pub start: u64,
    pub end: u64,
    pub consumed: u64,
    pub outcome: EventKind,
}

#[derive(Debug, Clone)]
pub struct NodeView {
    pub node_id: usize,
    pub busy_until: Option<u64>,
}

#[derive(Debug, Clone)]
struct Live {
    alloc: Allocation,
    noticed: bool,
    completes_at: Option<u64>,
    requeue: Option<(u64, u64)>,
}

#[derive(Debug, Clone)]
struct Entry {
    job: QueuedJob,
    status: JobStatus,
    eligible_at: u64,
    live: Option<Live>,
}

#[derive(Debug, Clone)]
pub struct ClusterState {
    cfg: ClusterConfig,
    clock: u64,
    jobs: BTreeMap<u64, Entry>,
    next_rank: u64,
    dirty: bool,
    pending: Vec<ClusterEvent>,
    history: Vec<AllocationRecord>,
}

impl ClusterState {
    pub fn new(cfg: ClusterConfig) -> Result<Self, SchedError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            clock: 0,
            jobs: BTreeMap::new(),
            next_rank: 0,
            dirty: false,
            pending: Vec::new(),
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn job(&self, job_id: u64) -> Option<&QueuedJob> {
        self.jobs.get(&job_id).map(|e| &e.job)
    }

    pub fn status(&self, job_id: u64) -> Option<JobStatus> {
        self.jobs.get(&job_id).map(|e| e.status)
    }

    pub fn allocation(&self, job_id: u64) -> Option<&Allocation> {
        self.jobs.get(&job_id)?.live.as_ref().map(|l| &l.alloc)
    }

    /// Closed allocations in the order they ended.
    pub fn history(&self) -> &[AllocationRecord] {
        &self.history
    }

    /// Jobs in the queue in priority order.
    pub fn queue(&self) -> Vec<&QueuedJob> {
        let mut q: Vec<&QueuedJob> =
            self.jobs.values().filter(|e| e.status == JobStatus::Queued).map(|e| &e.job).collect();
        q.sort_by_key(|j| (j.priority_rank, j.job_id));
        q
    }

    pub fn nodes(&self) -> Vec<NodeView> {
        let mut v: Vec<NodeView> = (0..self.cfg.nodes).map(|n| NodeView { node_id: n, busy_until: None }).collect();
        for l in self.jobs.values().filter_map(|e| e.live.as_ref()) {
            for &n in &l.alloc.node_ids {
                v[n].busy_until = Some(l.alloc.end());
            }
        }
        v
    }

    /// True when nothing is queued or running.
    pub fn is_idle(&self) -> bool {
        self.jobs.values().all(|e| !matches!(e.status, JobStatus::Queued | JobStatus::Running))
    }

    pub fn submit(&mut self, mut job: QueuedJob) -> Result<u64, SchedError> {
        if self.jobs.contains_key(&job.job_id) {
            return Err(SchedError::DuplicateJobId(job.job_id));
        }
        job.validate()?;
        job.priority_rank = self.next_rank;
        self.next_rank += 1;
        job.comment = format_comment((job.requested_walltime - job.remaining_walltime) * self.cfg.tick_seconds);
        let status = if job.nodes_needed > self.cfg.nodes { JobStatus::Starved } else { JobStatus::Queued };
        let id = job.job_id;
        self.jobs.insert(id, Entry { job, status, eligible_at: self.clock, live: None });
        self.dirty = true;
        Ok(id)
    }

    fn live_mut(&mut self, job_id: u64) -> Result<&mut Live, SchedError> {
        self.jobs
            .get_mut(&job_id)
            .ok_or(SchedError::UnknownJob(job_id))?
            .live
            .as_mut()
            .ok_or(SchedError::NotRunning(job_id))
    }

    fn check_time(&self, job_id: u64, at: u64, alloc: &Allocation) -> Result<(), SchedError> {
        if at < self.clock {
            return Err(SchedError::BadTime { job_id, at, reason: "before the clock" });
        }
        if at > alloc.end() {
            return Err(SchedError::BadTime { job_id, at, reason: "past the allocation limit" });
        }
        Ok(())
    }

    /// Driver reports that the job finished at `at`.
    pub fn complete_at(&mut self, job_id: u64, at: u64) -> Result<(), SchedError> {
        let alloc = self.live_mut(job_id)?.alloc.clone();
        self.check_time(job_id, at, &alloc)?;
        self.live_mut(job_id)?.completes_at = Some(at);
        if at == self.clock {
            self.dirty = true;
        }
        Ok(())
    }

    /// Release the job's allocation now and put it back in the queue.
    pub fn requeue(&mut self, job_id: u64, consumed: u64) -> Result<(), SchedError> {
        self.requeue_at(job_id, self.clock, consumed)
    }

    /// Like [`requeue`](Self::requeue) but at a later instant of the
    /// current allocation.
    pub fn requeue_at(&mut self, job_id: u64, at: u64, consumed: u64) -> Result<(), SchedError> {
        let e = self.jobs.get(&job_id).ok_or(SchedError::UnknownJob(job_id))?;
        let alloc = e.live.as_ref().ok_or(SchedError::NotRunning(job_id))?.alloc.clone();
        if consumed >= e.job.remaining_walltime {
            return Err(SchedError::ExhaustedWalltime { job_id, remaining: e.job.remaining_walltime, consumed });
        }
        self.check_time(job_id, at, &alloc)?;
        if at == self.clock {
            let mut out = std::mem::take(&mut self.pending);
            self.release(job_id, at, consumed, EventKind::JobRequeued, &mut out);
            self.pending = out;
            self.dirty = true;
        } else {
            self.live_mut(job_id)?.requeue = Some((at, consumed));
        }
        Ok(())
    }

    /// Placements for every eligible queued job at the current clock.
    pub fn plan_backfill(&self) -> Vec<(u64, Vec<usize>, u64)> {
        self.plan_at(self.clock)
    }

    fn plan_at(&self, t: u64) -> Vec<(u64, Vec<usize>, u64)> {
        let mut profile = Profile::new(self.cfg.nodes);
        for l in self.jobs.values().filter_map(|e| e.live.as_ref()) {
            profile.reserve(&l.alloc.node_ids, l.alloc.start, l.alloc.end());
        }
        let mut queue: Vec<&Entry> =
            self.jobs.values().filter(|e| e.status == JobStatus::Queued && e.eligible_at <= t).collect();
        queue.sort_by_key(|e| (e.job.priority_rank, e.job.job_id));
        let mut floor = t;
        let mut plan = Vec::with_capacity(queue.len());
        for e in queue {
            let d = e.job.limit();
            let (start, nodes) = profile.earliest(floor, d, e.job.nodes_needed);
            profile.reserve(&nodes, start, start + d);
            if !self.cfg.backfill {
                floor = start;
            }
            plan.push((e.job.job_id, nodes, start));
        }
        plan
    }

    fn release(&mut self, job_id: u64, at: u64, consumed: u64, outcome: EventKind, out: &mut Vec<ClusterEvent>) {
        let tick_seconds = self.cfg.tick_seconds;
        let delay = self.cfg.requeue_delay;
        let e = self.jobs.get_mut(&job_id).expect("released job exists");
        let live = e.live.take().expect("released job is running");
        let nodes = live.alloc.node_ids.clone();
        e.job.remaining_walltime -= consumed;
        if let Some(w) = e.job.work.as_mut() {
            *w = w.saturating_sub(at - live.alloc.start);
        }
        e.job.comment = format_comment((e.job.requested_walltime - e.job.remaining_walltime) * tick_seconds);
        e.status = match outcome {
            EventKind::JobCompleted => JobStatus::Completed,
            EventKind::TimedOut => JobStatus::TimedOut,
            _ => {
                e.eligible_at = at + delay;
                JobStatus::Queued
            }
        };
        self.history.push(AllocationRecord {
            job_id,
            node_ids: nodes.clone(),
            start: live.alloc.start,
            end: at,
            consumed,
            outcome,
        });
        out.push(ClusterEvent { at, kind: outcome, job_id, node_ids: nodes });
    }

    fn running(&self) -> impl Iterator<Item = (u64, &Live)> {
        self.jobs.iter().filter_map(|(id, e)| e.live.as_ref().map(|l| (*id, l)))
    }

    fn process_instant(&mut self, t: u64, out: &mut Vec<ClusterEvent>) {
        loop {
            let done: Vec<u64> = self.running().filter(|(_, l)| l.completes_at == Some(t)).map(|(id, _)| id).collect();
            for id in done {
                let start = self.jobs[&id].live.as_ref().expect("running").alloc.start;
                self.release(id, t, t - start, EventKind::JobCompleted, out);
            }
            let requeues: Vec<(u64, u64)> =
                self.running().filter_map(|(id, l)| l.requeue.filter(|r| r.0 == t).map(|r| (id, r.1))).collect();
            for (id, consumed) in requeues {
                self.release(id, t, consumed, EventKind::JobRequeued, out);
            }
            let expired: Vec<(u64, Vec<usize>, u64)> = self
                .running()
                .filter(|(_, l)| l.alloc.end() == t)
                .map(|(id, l)| (id, l.alloc.node_ids.clone(), l.alloc.limit))
                .collect();
            for (id, nodes, limit) in expired {
                out.push(ClusterEvent { at: t, kind: EventKind::WindowExpired, job_id: id, node_ids: nodes });
                let exhausted = self.jobs[&id].job.remaining_walltime <= limit;
                let kind = if exhausted { EventKind::TimedOut } else { EventKind::JobRequeued };
                self.release(id, t, limit, kind, out);
            }
            let notices: Vec<u64> =
                self.running().filter(|(_, l)| !l.noticed && l.alloc.notice_at == t).map(|(id, _)| id).collect();
            for id in notices {
                let live = self.jobs.get_mut(&id).and_then(|e| e.live.as_mut()).expect("running");
                live.noticed = true;
                out.push(ClusterEvent {
                    at: t,
                    kind: EventKind::PreemptNotice,
                    job_id: id,
                    node_ids: live.alloc.node_ids.clone(),
                });
            }
            let starts: Vec<(u64, Vec<usize>)> =
                self.plan_at(t).into_iter().filter(|p| p.2 == t).map(|(id, nodes, _)| (id, nodes)).collect();
            if starts.is_empty() {
                break;
            }
            for (id, nodes) in starts {
                let lead = self.cfg.signal_lead;
                let e = self.jobs.get_mut(&id).expect("planned job exists");
                let limit = e.job.limit();
                let alloc = Allocation {
                    job_id: id,
                    node_ids: nodes.clone(),
                    start: t,
                    limit,
                    notice_at: t + limit.saturating_sub(lead),
                };
                let completes_at = e.job.work.filter(|&w| w <= limit).map(|w| t + w);
                e.live = Some(Live { alloc, noticed: false, completes_at, requeue: None });
                e.status = JobStatus::Running;
                out.push(ClusterEvent { at: t, kind: EventKind::JobStarted, job_id: id, node_ids: nodes });
            }
        }
    }

    fn next_instant(&self) -> Option<u64> {
        let mut next: Option<u64> = None;
        let mut consider = |t: u64| {
            if t > self.clock {
                next = Some(next.map_or(t, |n| n.min(t)));
            }
        };
        for (_, l) in self.running() {
            consider(l.alloc.end());
            if !l.noticed {
                consider(l.alloc.notice_at);
            }
            if let Some(c) = l.completes_at {
                consider(c);
            }
            if let Some((r, _)) = l.requeue {
                consider(r);
            }
        }
        for e in self.jobs.values().filter(|e| e.status == JobStatus::Queued) {
            consider(e.eligible_at);
        }
        next
    }

    /// Process every event up to and including `until`, then set the
    /// clock to `until`.
    pub fn advance(&mut self, until: u64) -> Vec<ClusterEvent> {
        let mut out = std::mem::take(&mut self.pending);
        if until < self.clock {
            return out;
        }
        if self.dirty {
            self.dirty = false;
            let t = self.clock;
            self.process_instant(t, &mut out);
        }
        while let Some(t) = self.next_instant().filter(|&t| t <= until) {
            self.clock = t;
            self.process_instant(t, &mut out);
        }
        self.clock = until;
        out
    }

    /// Advance until nothing is queued or running, or `horizon` is reached.
    pub fn run_until_idle(&mut self, horizon: u64) -> Vec<ClusterEvent> {
        let mut out = self.advance(self.clock);
        while !self.is_idle() {
            match self.next_instant().filter(|&t| t <= horizon) {
                Some(t) => out.extend(self.advance(t)),
                None => break,
            }
        }
        out
    }
}
