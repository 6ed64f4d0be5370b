//! Randomized durability checks for the image store.

use std::fs;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use ckpt_core::imgstore::{CheckpointImage, CopyStatus, CrashPoint, ImageStore, StoreError};

fn payload(rng: &mut StdRng) -> Vec<u8> {
    let n = match rng.gen_range(0..10) {
        0 => 0,
        1..=6 => rng.gen_range(1..256),
        _ => rng.gen_range(256..8192),
    };
    (0..n).map(|_| rng.gen()).collect()
}

/// Damage a file so that it no longer verifies: flip a byte, truncate,
/// zero it out or append junk.
pub fn corrupt(path: &Path, rng: &mut StdRng) {
    let mut b = fs::read(path).unwrap();
    match rng.gen_range(0..4) {
        0 => {
            let i = rng.gen_range(0..b.len());
            b[i] ^= 1 << rng.gen_range(0..8);
        }
        1 => b.truncate(rng.gen_range(0..b.len())),
        2 => b.iter_mut().for_each(|x| *x = 0),
        _ => b.extend_from_slice(&[0xAB; 3]),
    }
    fs::write(path, b).unwrap();
}

fn same(img: &CheckpointImage, job: u64, g: u32, vt: u64, data: &[u8]) -> bool {
    img.job_id == job && img.generation == g && img.virtual_time == vt && img.payload == data
}

/// `n` write/read round trips spread over a handful of jobs.
pub fn roundtrips(n: usize, seed: u64) -> Result<(), String> {
    let d = tempfile::tempdir().unwrap();
    let mut store = ImageStore::with_policy(d.path(), 2, u32::MAX).unwrap();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut next = [1u32; 8];
    for i in 0..n {
        let job = rng.gen_range(0..8u64);
        let g = next[job as usize];
        next[job as usize] += 1;
        let vt = rng.gen();
        let data = payload(&mut rng);
        store.write_image(job, g, vt, &data).map_err(|e| format!("write {i}: {e}"))?;
        let back = store.read_generation(job, g).map_err(|e| format!("read {i}: {e}"))?;
        if !same(&back, job, g, vt, &data) {
            return Err(format!("round trip {i} differs"));
        }
        for copy in 0..2 {
            let bytes = fs::read(store.copy_path(job, g, copy)).unwrap();
            let img = CheckpointImage::decode(&bytes).map_err(|e| format!("copy {copy} of {i}: {e}"))?;
            if !same(&img, job, g, vt, &data) {
                return Err(format!("copy {copy} of round trip {i} differs"));
            }
        }
    }
    Ok(())
}

/// Corrupt one copy (`copies == 1`) or both copies (`copies == 2`) of a
/// fresh image, `n` times.
pub fn corruption(n: usize, copies: u32, seed: u64) -> Result<(), String> {
    let mut rng = StdRng::seed_from_u64(seed);
    for i in 0..n {
        let d = tempfile::tempdir().unwrap();
        let mut store = ImageStore::new(d.path());
        let data = payload(&mut rng);
        store.write_image(7, 1, i as u64, &data).unwrap();
        let first = rng.gen_range(0..2);
        for k in 0..copies {
            corrupt(&store.copy_path(7, 1, (first + k) % 2), &mut rng);
        }
        match (copies, store.read_generation(7, 1), store.read_latest(7)) {
            (1, Ok(a), Ok(b)) if same(&a, 7, 1, i as u64, &data) && a == b => {}
            (2, Err(StoreError::AllCopiesCorrupt { job_id: 7 }), Err(StoreError::AllCopiesCorrupt { job_id: 7 })) => {}
            (_, a, b) => return Err(format!("case {i}: {a:?} / {b:?}")),
        }
        let bad = store.verify(7, 1).unwrap().iter().filter(|v| v.status == CopyStatus::Corrupt).count();
        if bad != copies as usize {
            return Err(format!("case {i}: verify found {bad} corrupt copies"));
        }
    }
    Ok(())
}

/// Crash each write at a random point between temp write and rename and
/// check that no final-named copy fails verification.
pub fn crash_injection(n: usize, seed: u64) -> Result<(), String> {
    let mut rng = StdRng::seed_from_u64(seed);
    for i in 0..n {
        let d = tempfile::tempdir().unwrap();
        let mut store = ImageStore::new(d.path());
        let committed = rng.gen_range(0..3u32);
        let mut last = None;
        for g in 1..=committed {
            let data = payload(&mut rng);
            store.write_image(3, g, u64::from(g), &data).unwrap();
            last = Some(data);
        }
        let g = committed + 1;
        let copy = rng.gen_range(0..2);
        let point = if rng.gen_bool(0.5) {
            CrashPoint::BeforeRename { copy }
        } else {
            CrashPoint::TornWrite { copy, keep_bytes: rng.gen_range(0..64) }
        };
        store.inject_crash(point);
        let data = payload(&mut rng);
        if store.write_image(3, g, 0, &data).is_ok() {
            return Err(format!("case {i}: crash {point:?} did not interrupt the write"));
        }
        for gen in store.generations(3).unwrap() {
            for v in store.verify(3, gen).unwrap() {
                if v.status == CopyStatus::Corrupt {
                    return Err(format!("case {i}: {} fails verification", v.path.display()));
                }
            }
        }
        match (store.read_latest(3), &last) {
            (Ok(img), Some(prev)) if img.generation == committed && img.payload == *prev => {}
            // copy 0 renamed before the crash in copy 1: the new generation is readable
            (Ok(img), _) if img.generation == g && copy == 1 && img.payload == data => {}
            (Err(StoreError::NoImage { .. }), None) => {}
            (r, _) => return Err(format!("case {i}: unexpected read after crash {point:?}: {r:?}")),
        }
        store.clear_temps(3).unwrap();
    }
    Ok(())
}
