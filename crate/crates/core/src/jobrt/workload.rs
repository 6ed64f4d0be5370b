use super::JobError;

/// Number of lanes in the matrix-iter state vector.
const MATRIX_DIM: usize = 32;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum WorkloadKind {
    Counter = 0,
    PrngDigest = 1,
    MatrixIter = 2,
}

impl WorkloadKind {
    pub const ALL: [WorkloadKind; 3] = [Self::Counter, Self::PrngDigest, Self::MatrixIter];

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Self::Counter),
            1 => Some(Self::PrngDigest),
            2 => Some(Self::MatrixIter),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Counter => "counter",
            Self::PrngDigest => "prng-digest",
            Self::MatrixIter => "matrix-iter",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Length in bytes of the accumulator for this kind.
    pub fn accumulator_len(self) -> usize {
        match self {
            Self::Counter => 8,
            Self::PrngDigest => 16,
            Self::MatrixIter => MATRIX_DIM * 8,
        }
    }
}

impl std::fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Synthetic memory footprint of a job, used by the telemetry sampler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemModel {
    pub base_mb: f64,
    pub decay_mb_per_min: f64,
    pub ckpt_spike_fraction: f64,
}

impl Default for MemModel {
    fn default() -> Self {
        Self { base_mb: 1000.0, decay_mb_per_min: 0.0, ckpt_spike_fraction: 0.008 }
    }
}

impl MemModel {
    pub fn validate(&self) -> Result<(), JobError> {
        if !(self.base_mb > 0.0) || !self.base_mb.is_finite() {
            return Err(JobError::BadSpec(format!("base_mb must be > 0, got {}", self.base_mb)));
        }
        if !(self.decay_mb_per_min >= 0.0) {
            return Err(JobError::BadSpec("decay_mb_per_min must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.ckpt_spike_fraction) {
            return Err(JobError::BadSpec("ckpt_spike_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Resident memory after `t_run` minutes inside the current allocation.
    /// Never drops below one megabyte.
    pub fn resident_mb(&self, t_run: u64) -> f64 {
        (self.base_mb - self.decay_mb_per_min * t_run as f64).max(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobSpec {
    pub job_id: u64,
    pub kind: WorkloadKind,
    pub total_steps: u64,
    pub seed: u64,
    /// Virtual-time ticks consumed by one step.
    pub step_cost: u64,
    pub mem_model: MemModel,
}

impl JobSpec {
    pub fn new(job_id: u64, kind: WorkloadKind, total_steps: u64, seed: u64, step_cost: u64) -> Self {
        Self { job_id, kind, total_steps, seed, step_cost, mem_model: MemModel::default() }
    }

    pub fn with_mem_model(mut self, mem_model: MemModel) -> Self {
        self.mem_model = mem_model;
        self
    }

    pub fn validate(&self) -> Result<(), JobError> {
        if self.total_steps == 0 {
            return Err(JobError::BadSpec("total_steps must be >= 1".into()));
        }
        if self.step_cost == 0 {
            return Err(JobError::BadSpec("step_cost must be >= 1".into()));
        }
        self.mem_model.validate()
    }

    /// Ticks of work the job needs from a fresh start.
    pub fn work_ticks(&self) -> u64 {
        self.total_steps * self.step_cost
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobStatus {
    Running,
    Quiesced,
    Completed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobState {
    pub spec: JobSpec,
    pub steps_done: u64,
    pub accumulator: Vec<u8>,
    pub status: JobStatus,
}

impl JobState {
    pub fn launch(spec: JobSpec) -> Result<Self, JobError> {
        spec.validate()?;
        let accumulator = initial_accumulator(spec.kind, spec.seed);
        Ok(Self { spec, steps_done: 0, accumulator, status: JobStatus::Running })
    }

    pub fn job_id(&self) -> u64 {
        self.spec.job_id
    }

    pub fn is_completed(&self) -> bool {
        self.status == JobStatus::Completed
    }

    /// Pause at the current step boundary. No-op on a completed job.
    pub fn quiesce(&mut self) {
        if self.status == JobStatus::Running {
            self.status = JobStatus::Quiesced;
        }
    }

    pub fn resume(&mut self) {
        if self.status == JobStatus::Quiesced {
            self.status = JobStatus::Running;
        }
    }

    /// Advance one step in place.
    pub fn advance(&mut self) -> Result<(), JobError> {
        match self.status {
            JobStatus::Completed => return Err(JobError::AlreadyCompleted(self.spec.job_id)),
            JobStatus::Quiesced => return Err(JobError::NotRunning(self.spec.job_id)),
            JobStatus::Running => {}
        }
        apply_step(self.spec.kind, self.spec.seed, &mut self.accumulator);
        self.steps_done += 1;
        if self.steps_done == self.spec.total_steps {
            self.status = JobStatus::Completed;
        }
        Ok(())
    }

    /// Run until completion.
    pub fn run_to_end(&mut self) -> Result<(), JobError> {
        while !self.is_completed() {
            self.advance()?;
        }
        Ok(())
    }

    /// 64-bit FNV-1a digest over the accumulator and step count. Equal
    /// digests at completion mean bit-identical workload output.
    pub fn digest(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for b in self.steps_done.to_be_bytes().iter().chain(&self.accumulator) {
            h ^= u64::from(*b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        h
    }

    /// Counter value, for counter workloads.
    pub fn counter_value(&self) -> Option<u64> {
        (self.spec.kind == WorkloadKind::Counter).then(|| read_u64(&self.accumulator, 0))
    }
}

/// Build a fresh job with id 0 and the default memory model.
pub fn make_workload(kind: WorkloadKind, total_steps: u64, seed: u64, step_cost: u64) -> Result<JobState, JobError> {
    JobState::launch(JobSpec::new(0, kind, total_steps, seed, step_cost))
}

/// Pure form of [`JobState::advance`].
pub fn step(s: &JobState) -> Result<JobState, JobError> {
    let mut next = s.clone();
    next.advance()?;
    Ok(next)
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn read_u64(buf: &[u8], lane: usize) -> u64 {
    let mut b = [0u8; 8];
    b.copy_from_slice(&buf[lane * 8..lane * 8 + 8]);
    u64::from_be_bytes(b)
}

fn write_u64(buf: &mut [u8], lane: usize, v: u64) {
    buf[lane * 8..lane * 8 + 8].copy_from_slice(&v.to_be_bytes());
}

fn initial_accumulator(kind: WorkloadKind, seed: u64) -> Vec<u8> {
    let mut acc = vec![0u8; kind.accumulator_len()];
    match kind {
        WorkloadKind::Counter => {}
        WorkloadKind::PrngDigest => {
            let mut sm = seed;
            // xorshift state must be nonzero
            write_u64(&mut acc, 0, splitmix64(&mut sm) | 1);
            write_u64(&mut acc, 1, FNV_OFFSET);
        }
        WorkloadKind::MatrixIter => {
            let mut sm = seed ^ 0x6d61_7472_6978;
            for lane in 0..MATRIX_DIM {
                write_u64(&mut acc, lane, splitmix64(&mut sm));
            }
        }
    }
    acc
}

fn apply_step(kind: WorkloadKind, seed: u64, acc: &mut [u8]) {
    match kind {
        WorkloadKind::Counter => {
            let n = read_u64(acc, 0);
            write_u64(acc, 0, n.wrapping_add(1));
        }
        WorkloadKind::PrngDigest => {
            let mut x = read_u64(acc, 0);
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            let digest = (read_u64(acc, 1) ^ x).wrapping_mul(FNV_PRIME);
            write_u64(acc, 0, x);
            write_u64(acc, 1, digest);
        }
        WorkloadKind::MatrixIter => {
            // v' = A v + b (mod 2^64), A and b re-derived from the seed
            let v: Vec<u64> = (0..MATRIX_DIM).map(|i| read_u64(acc, i)).collect();
            let mut sm = seed ^ 0x6166_6669_6e65;
            for i in 0..MATRIX_DIM {
                let mut sum = splitmix64(&mut sm);
                for vj in &v {
                    sum = sum.wrapping_add(splitmix64(&mut sm).wrapping_mul(*vj));
                }
                write_u64(acc, i, sum.rotate_left(17));
            }
        }
    }
}
