/// Per-node busy intervals `[start, end)` used to place jobs.
#[derive(Debug, Clone)]
pub(crate) struct Profile {
    busy: Vec<Vec<(u64, u64)>>,
}

impl Profile {
    pub(crate) fn new(nodes: usize) -> Self {
        Self { busy: vec![Vec::new(); nodes] }
    }

    pub(crate) fn reserve(&mut self, nodes: &[usize], start: u64, end: u64) {
        for &n in nodes {
            self.busy[n].push((start, end));
        }
    }

    fn free_over(&self, node: usize, start: u64, end: u64) -> bool {
        self.busy[node].iter().all(|&(s, e)| e <= start || s >= end)
    }

    /// Earliest start ≥ `lo` at which `need` nodes are free for
    /// `duration` ticks, with the lowest-numbered nodes that fit.
    pub(crate) fn earliest(&self, lo: u64, duration: u64, need: usize) -> (u64, Vec<usize>) {
        let mut candidates: Vec<u64> = self.busy.iter().flatten().map(|&(_, e)| e).filter(|&e| e > lo).collect();
        candidates.push(lo);
        candidates.sort_unstable();
        candidates.dedup();
        for c in candidates {
            let free: Vec<usize> =
                (0..self.busy.len()).filter(|&n| self.free_over(n, c, c + duration)).take(need).collect();
            if free.len() == need {
                return (c, free);
            }
        }
        unreachable!("every node is free after the last interval ends")
    }
}
