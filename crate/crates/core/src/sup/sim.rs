use super::{EndpointRegistry, SupError, Supervisor};
use crate::sched::{ClusterEvent, ClusterState, JobStatus};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CosimOutcome {
    /// Last simulated minute.
    pub end_time: u64,
    /// Every supervised job completed.
    pub all_completed: bool,
}

/// Drive the scheduler and supervisors together, one virtual minute per
/// iteration, until every job is done or `horizon` passes. Scheduler
/// events are appended to `events` as they happen.
pub fn run_cosim(
    sched: &mut ClusterState,
    sups: &mut [Supervisor],
    reg: &mut EndpointRegistry,
    horizon: u64,
    events: &mut Vec<ClusterEvent>,
) -> Result<CosimOutcome, SupError> {
    let mut end_time = 0;
    for t in 0..=horizon {
        end_time = t;
        for s in sups.iter_mut() {
            if let Some(at) = s.completion_due() {
                sched.complete_at(s.job_id(), at)?;
            }
        }
        let mut batch = sched.advance(t);
        while !batch.is_empty() {
            for ev in &batch {
                if let Some(s) = sups.iter_mut().find(|s| s.job_id() == ev.job_id) {
                    s.on_event(ev, sched, reg)?;
                }
            }
            events.append(&mut batch);
            batch = sched.advance(t);
        }
        for s in sups.iter_mut() {
            s.simulate_minute(t)?;
        }
        let settled = sups.iter().all(|s| s.is_finished() || sched.status(s.job_id()) == Some(JobStatus::Starved));
        if settled {
            break;
        }
    }
    let all_completed = sups.iter().all(|s| matches!(s.outcome(), Some(super::JobOutcome::Completed { .. })));
    Ok(CosimOutcome { end_time, all_completed })
}
