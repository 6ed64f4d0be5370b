//! Brute-force minute-by-minute model of one auto-mode job on one node,
//! used to check the supervisor and scheduler together.

use std::collections::BTreeSet;

use ckpt_core::scenario::{run_scenario, Scenario, ScenarioReport};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Params {
    pub steps: u64,
    pub walltime: u64,
    pub window: u64,
    pub lead: u64,
    pub interval: u64,
    /// 0 or 1; longer checkpoints could overlap a notice and are not modelled.
    pub cost: u64,
    pub delay: u64,
    pub fail_at: BTreeSet<u64>,
}

impl Params {
    /// Walltime 60, 30-minute windows, interval 10, lead 5.
    pub fn sixty_thirty(fail_at: &[u64]) -> Self {
        Params {
            steps: 45,
            walltime: 60,
            window: 30,
            lead: 5,
            interval: 10,
            cost: 0,
            delay: 0,
            fail_at: fail_at.iter().copied().collect(),
        }
    }

    pub fn scenario_text(&self) -> String {
        let fails: Vec<String> = self.fail_at.iter().map(u64::to_string).collect();
        format!(
            "name = timeline\nmode = auto\n[cluster]\nsignal_lead = {}\nrequeue_delay = {}\n\
             [supervisor]\ncheckpoint_interval = {}\ncheckpoint_cost = {}\n\
             [job.1]\nsteps = {}\nwalltime = {}\nwindow = {}\n{}",
            self.lead,
            self.delay,
            self.interval,
            self.cost,
            self.steps,
            self.walltime,
            self.window,
            if fails.is_empty() { String::new() } else { format!("fail_writes_at = {}\n", fails.join(",")) },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Timeline {
    pub allocations: Vec<(u64, u64)>,
    pub checkpoints: Vec<u64>,
    pub completed_at: u64,
    pub reexecuted: u64,
    pub aborted: u64,
    pub consumed: u64,
}

/// `None` when the run leaves the modelled regime (window shorter than
/// the lead, walltime exhausted).
pub fn oracle(p: &Params) -> Option<Timeline> {
    let mut out = Timeline::default();
    let mut t = 0;
    let mut image: Option<u64> = None;
    let mut last_ckpt: Option<u64> = None;
    let mut high_water = 0;
    'alloc: loop {
        let start = t;
        let len = p.window.min(p.walltime.checked_sub(out.consumed)?);
        if len <= p.lead {
            return None;
        }
        let (end, notice) = (start + len, start + len - p.lead);
        let mut steps = image.unwrap_or(0);
        let mut busy_until = start;
        for m in start..end {
            if steps == p.steps {
                out.allocations.push((start, m));
                out.consumed += m - start;
                out.completed_at = m;
                return Some(out);
            }
            if m == notice {
                // one attempt plus one retry
                let ok = !p.fail_at.contains(&m);
                let at = if ok {
                    out.checkpoints.push(m);
                    image = Some(steps);
                    last_ckpt = Some(m);
                    (m + p.cost).min(end)
                } else {
                    out.aborted += 2;
                    m
                };
                out.allocations.push((start, at));
                out.consumed += at - start;
                t = at + p.delay;
                continue 'alloc;
            }
            if m < busy_until {
                continue;
            }
            if m - last_ckpt.unwrap_or(start).max(start) >= p.interval {
                if p.fail_at.contains(&m) {
                    out.aborted += 1;
                } else {
                    out.checkpoints.push(m);
                    image = Some(steps);
                    last_ckpt = Some(m);
                    if p.cost > 0 {
                        busy_until = m + p.cost;
                        continue;
                    }
                }
            }
            steps += 1;
            if steps <= high_water {
                out.reexecuted += 1;
            } else {
                high_water = steps;
            }
        }
        return None;
    }
}

/// What the real stack did, in the oracle's terms.
pub fn observed(r: &ScenarioReport) -> Option<Timeline> {
    let j = r.jobs.first()?;
    Some(Timeline {
        allocations: j.ledger.allocations.iter().map(|a| (a.start, a.end)).collect(),
        checkpoints: j.checkpoint_times.clone(),
        completed_at: j.completed_at()?,
        reexecuted: j.ledger.reexecuted_steps,
        aborted: j.aborted_rounds,
        consumed: j.ledger.consumed,
    })
}

pub fn run(p: &Params, out: &std::path::Path) -> ScenarioReport {
    let scn = Scenario::parse(&p.scenario_text()).expect("timeline scenario parses");
    run_scenario(&scn, out)
}
