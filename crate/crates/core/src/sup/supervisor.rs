use std::slice;

use super::{
    start_coordinator, stop_coordinator, update_comment, AllocationSpan, CoordinatorHandle, EndpointRegistry, JobLog,
    RunLedger, SupError, SupervisorConfig,
};
use crate::imgstore::ImageStore;
use crate::jobrt::{JobSpec, JobState};
use crate::proto::net::ServerConfig;
use crate::proto::{connect_agents, run_checkpoint_round, AgentFaults, AgentHost, Coordinator, StateFile};
use crate::sched::{ClusterEvent, ClusterState, EventKind, SchedError};
use crate::tel::{sample, Activity, EventTag, MetricTrace, TelemetryConfig};
use crate::timefmt::format_duration;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JobOutcome {
    Completed { at: u64, digest: u64, steps: u64 },
    TimedOut { at: u64 },
}

#[derive(Debug)]
struct Alloc {
    start: u64,
    nodes: Vec<usize>,
}

/// Supervisor of one job. Driven one event and one minute at a time by
/// [`run_cosim`](super::run_cosim).
#[derive(Debug)]
pub struct Supervisor {
    cfg: SupervisorConfig,
    spec: JobSpec,
    store: ImageStore,
    tel_cfg: TelemetryConfig,
    ledger: RunLedger,
    log: JobLog,
    pub faults: AgentFaults,
    coord: Option<Coordinator>,
    host: Option<AgentHost>,
    handle: Option<CoordinatorHandle>,
    alloc: Option<Alloc>,
    last_ckpt_at: Option<u64>,
    busy: Option<(u64, EventTag)>,
    requeue_pending: bool,
    tick_progress: u64,
    high_water: u64,
    finished_at: Option<u64>,
    completion_reported: bool,
    restart_minute: Option<u64>,
    trace: MetricTrace,
    outcome: Option<JobOutcome>,
    done_sampled: bool,
    final_state: Option<JobState>,
    checkpoint_times: Vec<u64>,
    aborted_rounds: u64,
}

impl Supervisor {
    pub fn new(
        cfg: SupervisorConfig,
        spec: JobSpec,
        store: ImageStore,
        tel_cfg: TelemetryConfig,
    ) -> Result<Self, SupError> {
        cfg.validate()?;
        spec.validate()?;
        let log = JobLog::new(cfg.log_path.clone(), spec.job_id);
        let trace = MetricTrace::new(spec.job_id, tel_cfg.sample_period);
        Ok(Self {
            cfg,
            spec,
            store,
            tel_cfg,
            ledger: RunLedger::default(),
            log,
            faults: AgentFaults::default(),
            coord: None,
            host: None,
            handle: None,
            alloc: None,
            last_ckpt_at: None,
            busy: None,
            requeue_pending: false,
            tick_progress: 0,
            high_water: 0,
            finished_at: None,
            completion_reported: false,
            restart_minute: None,
            trace,
            outcome: None,
            done_sampled: false,
            final_state: None,
            checkpoint_times: Vec::new(),
            aborted_rounds: 0,
        })
    }

    pub fn job_id(&self) -> u64 {
        self.spec.job_id
    }

    pub fn spec(&self) -> &JobSpec {
        &self.spec
    }

    pub fn config(&self) -> &SupervisorConfig {
        &self.cfg
    }

    pub fn ledger(&self) -> &RunLedger {
        &self.ledger
    }

    pub fn trace(&self) -> &MetricTrace {
        &self.trace
    }

    pub fn outcome(&self) -> Option<&JobOutcome> {
        self.outcome.as_ref()
    }

    /// Job state at completion.
    pub fn final_state(&self) -> Option<&JobState> {
        self.final_state.as_ref()
    }

    /// Virtual times of committed checkpoints.
    pub fn checkpoint_times(&self) -> &[u64] {
        &self.checkpoint_times
    }

    pub fn aborted_rounds(&self) -> u64 {
        self.aborted_rounds
    }

    pub fn is_finished(&self) -> bool {
        match self.outcome {
            Some(JobOutcome::Completed { .. }) => self.done_sampled,
            Some(JobOutcome::TimedOut { .. }) => true,
            None => false,
        }
    }

    /// Completion time not yet reported to the scheduler.
    pub fn completion_due(&mut self) -> Option<u64> {
        if self.completion_reported {
            return None;
        }
        let at = self.finished_at?;
        self.completion_reported = true;
        Some(at)
    }

    pub fn on_event(
        &mut self,
        ev: &ClusterEvent,
        sched: &mut ClusterState,
        reg: &mut EndpointRegistry,
    ) -> Result<(), SupError> {
        let t = ev.at;
        match ev.kind {
            EventKind::JobStarted => {
                let nodes: Vec<String> = ev.node_ids.iter().map(usize::to_string).collect();
                self.log.line(t, &format!("allocation start nodes={}", nodes.join(",")))?;
                self.alloc = Some(Alloc { start: t, nodes: ev.node_ids.clone() });
                if self.cfg.mode.checkpoints() {
                    let h = start_coordinator(
                        reg,
                        self.job_id(),
                        &self.cfg.endpoint,
                        &self.cfg.work_dir,
                        ServerConfig::default(),
                    )?;
                    self.log.line(t, &format!("coordinator started at {}", h.endpoint))?;
                    self.handle = Some(h);
                    let state = StateFile::new(self.cfg.work_dir.join(format!("coordinator.{}.state", self.job_id())));
                    self.coord =
                        Some(Coordinator::start(Some(state.clone())).map_err(|e| SupError::io(state.path(), e))?);
                }
                self.launch_or_restart(t)
            }
            EventKind::PreemptNotice => {
                self.log.line(t, "preemption notice")?;
                if self.cfg.mode.traps_notice() {
                    self.on_preempt_notice(t, sched)?;
                }
                Ok(())
            }
            EventKind::WindowExpired => self.log.line(t, "allocation window expired"),
            EventKind::JobRequeued | EventKind::JobCompleted | EventKind::TimedOut => {
                self.close_allocation(t, ev.kind, reg)
            }
        }
    }

    /// Fresh launch, or restore from the newest image when the mode
    /// restarts from checkpoints and one exists.
    pub fn launch_or_restart(&mut self, t: u64) -> Result<(), SupError> {
        let job = JobState::launch(self.spec.clone())?;
        let mut host = AgentHost::new(0, job, self.store.clone());
        host.faults = self.faults.clone();
        if let Some(coord) = self.coord.as_mut() {
            connect_agents(coord, slice::from_mut(&mut host))?;
        }
        self.tick_progress = 0;
        self.restart_minute = None;
        if self.cfg.mode.restores() && self.store.latest_generation(self.job_id())?.is_some() {
            let g = match host.restart_from(None) {
                Ok(g) => g,
                Err(e) => {
                    self.log.line(t, &format!("restart failed: {e}"))?;
                    return Err(e.into());
                }
            };
            self.ledger.restarts += 1;
            self.restart_minute = Some(t);
            self.log.line(t, &format!("restart from generation {g} at step {}", host.job().steps_done))?;
        } else {
            self.log.line(t, "launch fresh")?;
        }
        self.host = Some(host);
        Ok(())
    }

    fn round(&mut self, t: u64, why: &str) -> Result<bool, SupError> {
        let (Some(coord), Some(host)) = (self.coord.as_mut(), self.host.as_mut()) else {
            return Ok(false);
        };
        match run_checkpoint_round(coord, slice::from_mut(host), t) {
            Ok(g) => {
                let steps = host.job().steps_done;
                self.ledger.checkpoints_taken += 1;
                self.last_ckpt_at = Some(t);
                self.checkpoint_times.push(t);
                self.log.line(t, &format!("{why} checkpoint generation {g} committed at step {steps}"))?;
                Ok(true)
            }
            Err(e) if e.is_abort() => {
                self.aborted_rounds += 1;
                self.log.line(t, &format!("{why} checkpoint aborted: {e}"))?;
                Ok(false)
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Checkpoint (one retry), then requeue with the consumed time.
    pub fn on_preempt_notice(&mut self, t: u64, sched: &mut ClusterState) -> Result<(), SupError> {
        let Some(start) = self.alloc.as_ref().map(|a| a.start) else { return Ok(()) };
        if self.finished_at.is_some() || self.requeue_pending {
            return self.log.line(t, "notice ignored");
        }
        let committed = self.round(t, "preemption")? || self.round(t, "preemption")?;
        let end = sched.allocation(self.job_id()).map(|a| a.end()).unwrap_or(t);
        let at = if committed { (t + self.cfg.checkpoint_cost).min(end) } else { t };
        if !committed {
            self.log.line(t, "requeue without a new checkpoint")?;
        }
        if at > t {
            self.busy = Some((at, EventTag::Preempt));
        }
        let consumed = at - start;
        match sched.requeue_at(self.job_id(), at, consumed) {
            Ok(()) => {
                self.requeue_pending = true;
                self.log.line(t, &format!("requeue at {} consumed={consumed}", format_duration(at * 60)))
            }
            Err(SchedError::ExhaustedWalltime { .. }) => self.log.line(t, "no walltime left to requeue"),
            Err(e) => Err(e.into()),
        }
    }

    fn close_allocation(&mut self, t: u64, kind: EventKind, reg: &mut EndpointRegistry) -> Result<(), SupError> {
        let Some(a) = self.alloc.take() else { return Ok(()) };
        self.ledger.consumed += t - a.start;
        self.ledger.allocations.push(AllocationSpan { start: a.start, end: t, node_ids: a.nodes });
        let comment = update_comment(&mut self.ledger);
        if let Some(h) = self.handle.take() {
            stop_coordinator(reg, h, &self.cfg.endpoint);
        }
        self.coord = None;
        self.busy = None;
        self.requeue_pending = false;
        let host = self.host.take();
        if let Some(h) = &host {
            self.faults = h.faults.clone();
        }
        self.log.line(t, &format!("allocation end {comment}"))?;
        match kind {
            EventKind::JobCompleted => {
                let job = host.map(AgentHost::into_job).ok_or_else(|| {
                    SupError::BadConfig(format!("job {} completed without a running instance", self.job_id()))
                })?;
                self.outcome = Some(JobOutcome::Completed { at: t, digest: job.digest(), steps: job.steps_done });
                self.log.line(t, &format!("completed steps={} digest={:016x}", job.steps_done, job.digest()))?;
                self.final_state = Some(job);
            }
            EventKind::TimedOut => {
                self.outcome = Some(JobOutcome::TimedOut { at: t });
                self.log.line(t, "walltime exhausted")?;
            }
            _ => self.log.line(t, "requeued")?,
        }
        Ok(())
    }

    fn push_sample(&mut self, t: u64, activity: Activity) -> Result<(), SupError> {
        let p = sample(&self.spec.mem_model, &self.tel_cfg, t, activity);
        self.trace.push(p)?;
        Ok(())
    }

    /// Simulate the minute `[t, t + 1)`.
    pub fn simulate_minute(&mut self, t: u64) -> Result<(), SupError> {
        if let Some(o) = &self.outcome {
            if matches!(o, JobOutcome::Completed { .. }) && !self.done_sampled {
                self.done_sampled = true;
                self.push_sample(t, Activity::Done)?;
            }
            return Ok(());
        }
        let Some(start) = self.alloc.as_ref().map(|a| a.start) else {
            if !self.trace.samples.is_empty() {
                self.push_sample(t, Activity::Idle)?;
            }
            return Ok(());
        };
        let t_run = t - start;
        if let Some((until, tag)) = self.busy {
            if t < until {
                return self.push_sample(t, Activity::Checkpoint { t_run, tag });
            }
            self.busy = None;
        }
        let completed = self.host.as_ref().is_some_and(|h| h.job().is_completed());
        if self.requeue_pending || completed {
            return self.push_sample(t, Activity::Running { t_run });
        }
        if self.cfg.mode.checkpoints() && self.tick_progress == 0 {
            let since = self.last_ckpt_at.unwrap_or(start).max(start);
            if t - since >= self.cfg.checkpoint_interval && self.round(t, "interval")? && self.cfg.checkpoint_cost > 0 {
                self.busy = Some((t + self.cfg.checkpoint_cost, EventTag::Ckpt));
                return self.push_sample(t, Activity::Checkpoint { t_run, tag: EventTag::Ckpt });
            }
        }
        let activity =
            if self.restart_minute == Some(t) { Activity::Restart { t_run } } else { Activity::Running { t_run } };
        self.push_sample(t, activity)?;
        self.tick_progress += 1;
        if self.tick_progress == self.spec.step_cost {
            self.tick_progress = 0;
            let host = self.host.as_mut().expect("allocated job has an instance");
            host.job_mut().advance()?;
            let steps = host.job().steps_done;
            self.ledger.steps_executed += 1;
            if steps <= self.high_water {
                self.ledger.reexecuted_steps += 1;
            } else {
                self.high_water = steps;
            }
            if host.job().is_completed() {
                self.finished_at = Some(t + 1);
            }
        }
        Ok(())
    }
}
