//! Independent tick-by-tick scheduler used as an oracle. Placement is
//! found by scanning every start tick and every node subset against an
//! occupancy grid.

use ckpt_core::sched::{ClusterConfig, ClusterEvent, ClusterState, EventKind, QueuedJob};
use ckpt_core::timefmt::parse_comment;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[derive(Debug, Clone, Copy)]
pub struct JobParams {
    pub need: usize,
    pub walltime: u64,
    pub window: u64,
    pub work: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct Settings {
    pub nodes: usize,
    pub lead: u64,
    pub delay: u64,
    pub backfill: bool,
}

enum St {
    Waiting,
    Running { start: u64, nodes: Vec<usize>, limit: u64, noticed: bool },
    Done,
}

struct OJob {
    p: JobParams,
    remaining: u64,
    work: u64,
    eligible: u64,
    st: St,
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if n < k {
        return vec![];
    }
    // lexicographic order
    let mut out = Vec::new();
    for first in 0..n {
        for rest in subsets(n, k - 1) {
            if rest.iter().all(|&r| r > first) {
                let mut v = vec![first];
                v.extend(rest);
                out.push(v);
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

pub fn oracle(s: Settings, jobs: &[JobParams], horizon: u64) -> Vec<(u64, EventKind, u64, Vec<usize>)> {
    let mut js: Vec<OJob> = jobs
        .iter()
        .map(|p| OJob { p: *p, remaining: p.walltime, work: p.work, eligible: 0, st: St::Waiting })
        .collect();
    let span = (horizon + jobs.iter().map(|j| j.walltime).sum::<u64>() + 2) as usize;
    let mut ev = Vec::new();
    for t in 0..=horizon {
        loop {
            for (id, j) in js.iter_mut().enumerate() {
                if let St::Running { start, nodes, limit, .. } = &j.st {
                    if j.work <= *limit && start + j.work == t {
                        ev.push((t, EventKind::JobCompleted, id as u64, nodes.clone()));
                        j.remaining -= t - start;
                        j.st = St::Done;
                    }
                }
            }
            for (id, j) in js.iter_mut().enumerate() {
                if let St::Running { start, nodes, limit, .. } = &j.st {
                    if start + limit == t {
                        let nodes = nodes.clone();
                        let limit = *limit;
                        ev.push((t, EventKind::WindowExpired, id as u64, nodes.clone()));
                        j.remaining -= limit;
                        j.work -= limit;
                        if j.remaining == 0 {
                            ev.push((t, EventKind::TimedOut, id as u64, nodes));
                            j.st = St::Done;
                        } else {
                            ev.push((t, EventKind::JobRequeued, id as u64, nodes));
                            j.eligible = t + s.delay;
                            j.st = St::Waiting;
                        }
                    }
                }
            }
            for (id, j) in js.iter_mut().enumerate() {
                if let St::Running { start, nodes, limit, noticed } = &mut j.st {
                    if !*noticed && *start + limit.saturating_sub(s.lead) == t {
                        *noticed = true;
                        ev.push((t, EventKind::PreemptNotice, id as u64, nodes.clone()));
                    }
                }
            }
            // reservations over an occupancy grid
            let mut grid = vec![vec![false; span]; s.nodes];
            for j in &js {
                if let St::Running { start, nodes, limit, .. } = &j.st {
                    for &n in nodes {
                        for x in *start..start + limit {
                            grid[n][x as usize] = true;
                        }
                    }
                }
            }
            let mut floor = t;
            let mut starts = Vec::new();
            for (id, j) in js.iter().enumerate() {
                if !matches!(j.st, St::Waiting) || j.eligible > t || j.p.need > s.nodes {
                    continue;
                }
                let d = j.p.window.min(j.remaining);
                let mut placed = None;
                'search: for st in floor.. {
                    for sub in subsets(s.nodes, j.p.need) {
                        if sub.iter().all(|&n| (st..st + d).all(|x| !grid[n][x as usize])) {
                            placed = Some((st, sub));
                            break 'search;
                        }
                    }
                }
                let (st, sub) = placed.expect("a placement always exists");
                for &n in &sub {
                    for x in st..st + d {
                        grid[n][x as usize] = true;
                    }
                }
                if !s.backfill {
                    floor = st;
                }
                if st == t {
                    starts.push((id, sub, d));
                }
            }
            if starts.is_empty() {
                break;
            }
            for (id, sub, d) in starts {
                ev.push((t, EventKind::JobStarted, id as u64, sub.clone()));
                js[id].st = St::Running { start: t, nodes: sub, limit: d, noticed: false };
            }
        }
    }
    ev
}

pub fn cluster_for(s: Settings) -> ClusterState {
    ClusterState::new(ClusterConfig {
        nodes: s.nodes,
        signal_lead: s.lead,
        requeue_delay: s.delay,
        backfill: s.backfill,
        ..Default::default()
    })
    .unwrap()
}

pub fn simulate(s: Settings, jobs: &[JobParams], horizon: u64) -> Vec<(u64, EventKind, u64, Vec<usize>)> {
    let mut c = cluster_for(s);
    for (id, j) in jobs.iter().enumerate() {
        c.submit(QueuedJob::new(id as u64, j.need, j.walltime, j.window).with_work(j.work)).unwrap();
    }
    c.advance(horizon).into_iter().map(|e| (e.at, e.kind, e.job_id, e.node_ids)).collect()
}

/// Exhaustive grid: every instance with 1 to 3 jobs drawn from a menu of
/// job shapes, on 1 or 2 nodes, horizon 20. Returns (instances, mismatches).
pub fn exhaustive_grid() -> (usize, Vec<String>) {
    let mut menu = Vec::new();
    for need in [1, 2] {
        for work in [1, 3, 7] {
            for walltime in [4, 9] {
                for window in [3, 6] {
                    menu.push(JobParams { need, walltime, window, work });
                }
            }
        }
    }
    let mut instances: Vec<Vec<JobParams>> = Vec::new();
    for a in &menu {
        instances.push(vec![*a]);
        for b in &menu {
            instances.push(vec![*a, *b]);
            for c in &menu {
                instances.push(vec![*a, *b, *c]);
            }
        }
    }
    let mut count = 0;
    let mut bad = Vec::new();
    for (i, jobs) in instances.iter().enumerate() {
        for nodes in [1, 2] {
            let s = Settings { nodes, lead: [1, 2, 5][i % 3], delay: [0, 2][(i / 3) % 2], backfill: (i / 6) % 2 == 0 };
            count += 1;
            let want = oracle(s, jobs, 20);
            let got = simulate(s, jobs, 20);
            if want != got && bad.len() < 5 {
                bad.push(format!("{s:?} {jobs:?}\n oracle {want:?}\n   sim  {got:?}"));
            }
        }
    }
    (count, bad)
}

/// Property checks on one random instance with driver requeues mixed in.
pub fn random_instance_check(seed: u64) -> Result<(), String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let s = Settings {
        nodes: rng.gen_range(1..=4),
        lead: rng.gen_range(1..=6),
        delay: rng.gen_range(0..=5),
        backfill: rng.gen_bool(0.7),
    };
    let n_jobs = rng.gen_range(1..=8);
    let jobs: Vec<(u64, JobParams)> = (0..n_jobs)
        .map(|_| {
            let walltime = rng.gen_range(2..=60);
            (
                rng.gen_range(0..30),
                JobParams {
                    need: rng.gen_range(1..=4),
                    walltime,
                    window: rng.gen_range(1..=walltime + 5),
                    work: rng.gen_range(1..=70),
                },
            )
        })
        .collect();
    let horizon = 300;
    let run = |driver_seed: u64| -> Result<(Vec<ClusterEvent>, ClusterState), String> {
        let mut drv = StdRng::seed_from_u64(driver_seed);
        let mut c = cluster_for(s);
        let mut ev = Vec::new();
        for t in 0..=horizon {
            for (id, (at, p)) in jobs.iter().enumerate() {
                if *at == t {
                    c.submit(QueuedJob::new(id as u64, p.need, p.walltime, p.window).with_work(p.work))
                        .map_err(|e| e.to_string())?;
                }
            }
            let step = c.advance(t);
            for e in &step {
                if e.kind == EventKind::PreemptNotice && drv.gen_bool(0.5) {
                    // a step can span two instants; skip notices of closed allocations
                    let Some(a) = c.allocation(e.job_id).filter(|a| a.notice_at == e.at).cloned() else { continue };
                    let at = drv.gen_range(t..a.end());
                    let consumed = at - a.start;
                    if consumed < c.job(e.job_id).unwrap().remaining_walltime {
                        c.requeue_at(e.job_id, at, consumed).map_err(|e| e.to_string())?;
                    }
                }
            }
            ev.extend(step);
        }
        ev.extend(c.advance(horizon));
        Ok((ev, c))
    };
    let (ev, c) = run(seed ^ 0xA5A5)?;
    let (ev2, _) = run(seed ^ 0xA5A5)?;
    if ev != ev2 {
        return Err("non-deterministic event stream".into());
    }
    if ev.windows(2).any(|w| w[0].at > w[1].at) {
        return Err("events out of order".into());
    }
    // rebuild allocations from the event stream
    let mut open: std::collections::BTreeMap<u64, (u64, Vec<usize>, u32)> = Default::default();
    let mut closed: Vec<(u64, u64, u64, Vec<usize>, u32, EventKind)> = Vec::new();
    for e in &ev {
        match e.kind {
            EventKind::JobStarted => {
                if open.insert(e.job_id, (e.at, e.node_ids.clone(), 0)).is_some() {
                    return Err(format!("job {} started twice", e.job_id));
                }
            }
            EventKind::PreemptNotice => {
                let o = open.get_mut(&e.job_id).ok_or("notice without allocation")?;
                o.2 += 1;
            }
            EventKind::JobCompleted | EventKind::JobRequeued | EventKind::TimedOut => {
                let (start, nodes, notices) = open.remove(&e.job_id).ok_or("release without allocation")?;
                closed.push((e.job_id, start, e.at, nodes, notices, e.kind));
            }
            EventKind::WindowExpired => {}
        }
    }
    let mut all: Vec<(u64, u64, Vec<usize>)> = closed.iter().map(|c| (c.1, c.2, c.3.clone())).collect();
    all.extend(open.values().map(|o| (o.0, u64::MAX, o.1.clone())));
    for (i, a) in all.iter().enumerate() {
        for b in &all[i + 1..] {
            if a.2.iter().any(|n| b.2.contains(n)) && a.0 < b.1 && b.0 < a.1 {
                return Err(format!("oversubscription {a:?} {b:?}"));
            }
        }
    }
    let expired: std::collections::BTreeSet<(u64, u64)> =
        ev.iter().filter(|e| e.kind == EventKind::WindowExpired).map(|e| (e.job_id, e.at)).collect();
    for (job, start, end, _, notices, _) in &closed {
        if *notices > 1 {
            return Err(format!("job {job}: {notices} notices in one allocation"));
        }
        if expired.contains(&(*job, *end)) && *notices != 1 {
            return Err(format!("job {job}: expired allocation [{start},{end}) without a notice"));
        }
    }
    for (id, (_, p)) in jobs.iter().enumerate() {
        let j = c.job(id as u64).unwrap();
        let used: u64 = c.history().iter().filter(|r| r.job_id == id as u64).map(|r| r.consumed).sum();
        if p.walltime - j.remaining_walltime != used {
            return Err(format!("job {id}: walltime not conserved"));
        }
        if parse_comment(&j.comment).map_err(|e| e.to_string())? != used * 60 {
            return Err(format!("job {id}: comment {} disagrees with {used}", j.comment));
        }
    }
    Ok(())
}
