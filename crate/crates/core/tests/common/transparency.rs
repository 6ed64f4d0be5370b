//! Interrupt, snapshot, restore and compare against an uninterrupted run.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use ckpt_core::imgstore::ImageStore;
use ckpt_core::jobrt::{restore_for, snapshot, JobSpec, JobState, WorkloadKind};

/// One tuple: run to each cut, checkpoint through the image store, keep
/// running a little (work that is lost), then restore and continue.
pub fn check_tuple(
    kind: WorkloadKind,
    seed: u64,
    total: u64,
    cuts: &[u64],
    dir: &std::path::Path,
) -> Result<(), String> {
    let spec = JobSpec::new(seed % 1000, kind, total, seed, 1);
    let mut whole = JobState::launch(spec.clone()).map_err(|e| e.to_string())?;
    whole.run_to_end().map_err(|e| e.to_string())?;

    let mut store = ImageStore::with_policy(dir, 2, 4).unwrap();
    let mut job = JobState::launch(spec.clone()).map_err(|e| e.to_string())?;
    for (g, &cut) in cuts.iter().enumerate() {
        while job.steps_done < cut {
            job.advance().map_err(|e| e.to_string())?;
        }
        job.quiesce();
        store.write_image(spec.job_id, g as u32 + 1, cut, &snapshot(&job)).map_err(|e| e.to_string())?;
        store.prune(spec.job_id).map_err(|e| e.to_string())?;
        job.resume();
        // progress past the checkpoint that the interruption throws away
        for _ in 0..(cut % 7) {
            if job.is_completed() {
                break;
            }
            job.advance().map_err(|e| e.to_string())?;
        }
        let img = store.read_latest(spec.job_id).map_err(|e| e.to_string())?;
        job = restore_for(&spec, &img.payload).map_err(|e| e.to_string())?;
        if job.steps_done != cut {
            return Err(format!("restored at step {} instead of {cut}", job.steps_done));
        }
    }
    job.run_to_end().map_err(|e| e.to_string())?;
    if job.digest() != whole.digest() || job.accumulator != whole.accumulator {
        return Err(format!(
            "{kind:?} seed {seed} cuts {cuts:?}: digest {:016x} != {:016x}",
            job.digest(),
            whole.digest()
        ));
    }
    Ok(())
}

/// `n` random (kind, seed, cut set) tuples.
pub fn tuples(n: usize, seed: u64) -> Result<(), String> {
    let mut rng = StdRng::seed_from_u64(seed);
    for i in 0..n {
        let kind = *WorkloadKind::ALL.choose(&mut rng).unwrap();
        let total = rng.gen_range(1..400);
        let mut cuts: Vec<u64> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..=total)).collect();
        cuts.sort_unstable();
        let d = tempfile::tempdir().unwrap();
        check_tuple(kind, rng.gen(), total, &cuts, d.path()).map_err(|e| format!("tuple {i}: {e}"))?;
    }
    Ok(())
}
