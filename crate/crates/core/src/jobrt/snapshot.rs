//! Snapshot payload, big-endian:
//!
//! ```text
//! version u16 | kind u8 | job_id u64 | total_steps u64 | seed u64 |
//! steps_done u64 | accumulator_len u32 | accumulator
//! ```
//!
//! The execution profile (`step_cost`, memory model) is not part of the
//! payload; [`restore_for`] reattaches it from a known spec.

use super::{JobError, JobSpec, JobState, JobStatus, WorkloadKind};

pub const SNAPSHOT_VERSION: u16 = 1;
pub const SNAPSHOT_HEADER_LEN: usize = 2 + 1 + 8 + 8 + 8 + 8 + 4;

pub fn snapshot(s: &JobState) -> Vec<u8> {
    let mut out = Vec::with_capacity(SNAPSHOT_HEADER_LEN + s.accumulator.len());
    out.extend_from_slice(&SNAPSHOT_VERSION.to_be_bytes());
    out.push(s.spec.kind as u8);
    out.extend_from_slice(&s.spec.job_id.to_be_bytes());
    out.extend_from_slice(&s.spec.total_steps.to_be_bytes());
    out.extend_from_slice(&s.spec.seed.to_be_bytes());
    out.extend_from_slice(&s.steps_done.to_be_bytes());
    out.extend_from_slice(&(s.accumulator.len() as u32).to_be_bytes());
    out.extend_from_slice(&s.accumulator);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], JobError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            JobError::CorruptSnapshot(format!("truncated at offset {} (len {})", self.pos, self.buf.len()))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, JobError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, JobError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, JobError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Rebuild a job from snapshot bytes with `step_cost = 1` and the default
/// memory model. A restored job is always runnable unless it had already
/// finished every step.
pub fn restore(b: &[u8]) -> Result<JobState, JobError> {
    let mut r = Reader { buf: b, pos: 0 };
    let version = r.u16().map_err(|_| JobError::CorruptSnapshot("missing version".into()))?;
    if version != SNAPSHOT_VERSION {
        return Err(JobError::BadSnapshotVersion(version));
    }
    let kind_byte = r.take(1)?[0];
    let kind = WorkloadKind::from_byte(kind_byte)
        .ok_or_else(|| JobError::CorruptSnapshot(format!("unknown workload kind {kind_byte}")))?;
    let job_id = r.u64()?;
    let total_steps = r.u64()?;
    let seed = r.u64()?;
    let steps_done = r.u64()?;
    let acc_len = r.u32()? as usize;
    let accumulator = r.take(acc_len)?.to_vec();
    if r.pos != b.len() {
        return Err(JobError::CorruptSnapshot(format!("{} trailing bytes", b.len() - r.pos)));
    }
    if acc_len != kind.accumulator_len() {
        return Err(JobError::CorruptSnapshot(format!("accumulator length {acc_len} does not match {kind}")));
    }
    if total_steps == 0 || steps_done > total_steps {
        return Err(JobError::CorruptSnapshot(format!("steps_done {steps_done} outside 0..={total_steps}")));
    }
    let status = if steps_done == total_steps { JobStatus::Completed } else { JobStatus::Running };
    Ok(JobState { spec: JobSpec::new(job_id, kind, total_steps, seed, 1), steps_done, accumulator, status })
}

/// Restore a snapshot that must belong to `spec`, keeping the spec's
/// execution profile.
pub fn restore_for(spec: &JobSpec, b: &[u8]) -> Result<JobState, JobError> {
    let mut s = restore(b)?;
    if s.spec.job_id != spec.job_id
        || s.spec.kind != spec.kind
        || s.spec.total_steps != spec.total_steps
        || s.spec.seed != spec.seed
    {
        return Err(JobError::CorruptSnapshot(format!(
            "snapshot belongs to job {} ({}), expected job {} ({})",
            s.spec.job_id, s.spec.kind, spec.job_id, spec.kind
        )));
    }
    s.spec = spec.clone();
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jobrt::make_workload;
    use proptest::prelude::*;

    fn counter_at(n: u64) -> JobState {
        let mut s = make_workload(WorkloadKind::Counter, 10, 0, 1).unwrap();
        for _ in 0..n {
            s.advance().unwrap();
        }
        s
    }

    #[test]
    fn counter_snapshot_has_fixed_length() {
        let bytes = snapshot(&counter_at(6));
        assert_eq!(SNAPSHOT_HEADER_LEN, 39);
        assert_eq!(bytes.len(), 47);
        assert_eq!(&bytes[..3], &[0x00, 0x01, 0x00]);
        assert_eq!(&bytes[39..], &6u64.to_be_bytes());
    }

    #[test]
    fn counter_restores_running() {
        let s = counter_at(6);
        let back = restore(&snapshot(&s)).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.counter_value(), Some(6));
        assert_eq!(back.status, JobStatus::Running);
    }

    #[test]
    fn quiesced_snapshot_restores_as_running() {
        let mut s = counter_at(3);
        s.quiesce();
        let bytes = snapshot(&s);
        assert_eq!(bytes, snapshot(&counter_at(3)));
        let back = restore(&bytes).unwrap();
        assert_eq!(back.status, JobStatus::Running);
        assert_eq!(back.steps_done, 3);
        assert_eq!(back.accumulator, s.accumulator);
    }

    #[test]
    fn version_99_rejected() {
        let mut bytes = snapshot(&counter_at(1));
        bytes[0..2].copy_from_slice(&99u16.to_be_bytes());
        assert_eq!(restore(&bytes), Err(JobError::BadSnapshotVersion(99)));
    }

    #[test]
    fn truncated_rejected() {
        let bytes = snapshot(&counter_at(1));
        for cut in [0, 1, 5, SNAPSHOT_HEADER_LEN, bytes.len() - 1] {
            assert!(matches!(restore(&bytes[..cut]), Err(JobError::CorruptSnapshot(_))), "cut at {cut}");
        }
    }

    #[test]
    fn wrong_job_rejected_by_restore_for() {
        let s = counter_at(2);
        let other = JobSpec::new(9, WorkloadKind::Counter, 10, 0, 1);
        assert!(matches!(restore_for(&other, &snapshot(&s)), Err(JobError::CorruptSnapshot(_))));
    }

    fn arb_state() -> impl Strategy<Value = JobState> {
        (0usize..3, 1u64..60, any::<u64>(), any::<u64>(), 1u64..5, 0u64..60, any::<bool>()).prop_map(
            |(k, total, seed, job_id, cost, done, quiesced)| {
                let spec = JobSpec::new(job_id, WorkloadKind::ALL[k], total, seed, cost);
                let mut s = JobState::launch(spec).unwrap();
                for _ in 0..done.min(total) {
                    s.advance().unwrap();
                }
                if quiesced {
                    s.quiesce();
                }
                s
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn restore_inverts_snapshot(s in arb_state()) {
            let back = restore_for(&s.spec, &snapshot(&s)).unwrap();
            prop_assert_eq!(&back.spec, &s.spec);
            prop_assert_eq!(back.steps_done, s.steps_done);
            prop_assert_eq!(&back.accumulator, &s.accumulator);
            let expected = if s.is_completed() { JobStatus::Completed } else { JobStatus::Running };
            prop_assert_eq!(back.status, expected);
        }
    }
}
