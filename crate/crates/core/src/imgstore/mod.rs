//! Durable checkpoint-image storage.
//!
//! Each generation of a job is written as `redundancy` identical copies at
//! `<root>/<job_id>/gen<generation>.copy<k>.ckpt`. Copies are written to a
//! hidden temporary name, fsynced, then renamed into place, so a final-named
//! file is always complete.

mod image;

pub use image::{CheckpointImage, ImageDecodeError, IMAGE_HEADER_LEN, IMAGE_MAGIC, IMAGE_TRAILER_LEN, IMAGE_VERSION};

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use log::warn;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("job {job_id}: generation {got} is not the next generation (expected {expected})")]
    NonMonotonicGeneration { job_id: u64, expected: u32, got: u32 },
    #[error("storage failure at {path}: {source}")]
    StorageFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("no image for job {job_id}")]
    NoImage { job_id: u64 },
    #[error("every copy of job {job_id} is corrupt")]
    AllCopiesCorrupt { job_id: u64 },
    #[error("invalid store configuration: {0}")]
    BadConfig(&'static str),
    #[error("payload of {0} bytes exceeds the image format limit")]
    OversizePayload(usize),
}

impl StoreError {
    fn io(path: &Path, source: io::Error) -> Self {
        Self::StorageFailure { path: path.to_path_buf(), source }
    }
}

/// Where an injected crash interrupts [`ImageStore::write_image`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPoint {
    /// Temp file for copy `copy` fully written and synced, rename not done.
    BeforeRename { copy: u32 },
    /// Only the first `keep_bytes` of copy `copy` reach the temp file.
    TornWrite { copy: u32, keep_bytes: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRef {
    pub job_id: u64,
    pub generation: u32,
    pub copies: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CopyStatus {
    Ok,
    Corrupt,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CopyVerdict {
    pub copy: u32,
    pub path: PathBuf,
    pub status: CopyStatus,
}

#[derive(Debug, Clone)]
pub struct ImageStore {
    root: PathBuf,
    redundancy: u32,
    keep: u32,
    crash: Option<CrashPoint>,
}

impl ImageStore {
    pub const DEFAULT_REDUNDANCY: u32 = 2;
    pub const DEFAULT_KEEP: u32 = 2;

    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), redundancy: Self::DEFAULT_REDUNDANCY, keep: Self::DEFAULT_KEEP, crash: None }
    }

    pub fn with_policy(root: impl Into<PathBuf>, redundancy: u32, keep: u32) -> Result<Self, StoreError> {
        if redundancy == 0 {
            return Err(StoreError::BadConfig("redundancy must be >= 1"));
        }
        if keep == 0 {
            return Err(StoreError::BadConfig("keep must be >= 1"));
        }
        Ok(Self { redundancy, keep, ..Self::new(root) })
    }

    /// Arm a one-shot crash for the next write.
    pub fn inject_crash(&mut self, point: CrashPoint) {
        self.crash = Some(point);
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn redundancy(&self) -> u32 {
        self.redundancy
    }

    pub fn keep(&self) -> u32 {
        self.keep
    }

    pub fn job_dir(&self, job_id: u64) -> PathBuf {
        self.root.join(job_id.to_string())
    }

    pub fn copy_path(&self, job_id: u64, generation: u32, copy: u32) -> PathBuf {
        self.job_dir(job_id).join(format!("gen{generation}.copy{copy}.ckpt"))
    }

    fn temp_path(&self, job_id: u64, generation: u32, copy: u32) -> PathBuf {
        self.job_dir(job_id).join(format!(".gen{generation}.copy{copy}.ckpt.tmp"))
    }

    /// Generations with at least one final-named copy, ascending.
    pub fn generations(&self, job_id: u64) -> Result<Vec<u32>, StoreError> {
        let dir = self.job_dir(job_id);
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(StoreError::io(&dir, e)),
        };
        let mut gens = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| StoreError::io(&dir, e))?;
            if let Some((g, _)) = entry.file_name().to_str().and_then(parse_copy_name) {
                gens.push(g);
            }
        }
        gens.sort_unstable();
        gens.dedup();
        Ok(gens)
    }

    pub fn latest_generation(&self, job_id: u64) -> Result<Option<u32>, StoreError> {
        Ok(self.generations(job_id)?.last().copied())
    }

    pub fn write_image(
        &mut self,
        job_id: u64,
        generation: u32,
        virtual_time: u64,
        payload: &[u8],
    ) -> Result<ImageRef, StoreError> {
        if payload.len() > u32::MAX as usize {
            return Err(StoreError::OversizePayload(payload.len()));
        }
        let expected = self.latest_generation(job_id)?.map_or(1, |g| g + 1);
        if generation != expected {
            return Err(StoreError::NonMonotonicGeneration { job_id, expected, got: generation });
        }
        let dir = self.job_dir(job_id);
        fs::create_dir_all(&dir).map_err(|e| StoreError::io(&dir, e))?;
        let bytes = CheckpointImage { job_id, generation, virtual_time, payload: payload.to_vec() }.encode();
        let crash = self.crash.take();
        let mut copies = Vec::with_capacity(self.redundancy as usize);
        for copy in 0..self.redundancy {
            let tmp = self.temp_path(job_id, generation, copy);
            let fin = self.copy_path(job_id, generation, copy);
            let data = match crash {
                Some(CrashPoint::TornWrite { copy: c, keep_bytes }) if c == copy => {
                    &bytes[..keep_bytes.min(bytes.len())]
                }
                _ => &bytes[..],
            };
            write_synced(&tmp, data).map_err(|e| StoreError::io(&tmp, e))?;
            match crash {
                Some(CrashPoint::BeforeRename { copy: c }) | Some(CrashPoint::TornWrite { copy: c, .. })
                    if c == copy =>
                {
                    return Err(StoreError::io(
                        &tmp,
                        io::Error::new(io::ErrorKind::Interrupted, "injected crash before rename"),
                    ));
                }
                _ => {}
            }
            fs::rename(&tmp, &fin).map_err(|e| StoreError::io(&fin, e))?;
            copies.push(fin);
        }
        sync_dir(&dir).map_err(|e| StoreError::io(&dir, e))?;
        Ok(ImageRef { job_id, generation, copies })
    }

    /// Read one generation, trying copies in order.
    pub fn read_generation(&self, job_id: u64, generation: u32) -> Result<CheckpointImage, StoreError> {
        let mut any = false;
        for copy in 0..self.redundancy {
            let path = self.copy_path(job_id, generation, copy);
            match self.load_copy(&path, job_id, generation) {
                Ok(img) => return Ok(img),
                Err(CopyStatus::Missing) => {}
                Err(_) => {
                    any = true;
                    warn!("corrupt image copy {}", path.display());
                }
            }
        }
        if any {
            Err(StoreError::AllCopiesCorrupt { job_id })
        } else {
            Err(StoreError::NoImage { job_id })
        }
    }

    /// Highest generation that verifies on at least one copy.
    pub fn read_latest(&self, job_id: u64) -> Result<CheckpointImage, StoreError> {
        let gens = self.generations(job_id)?;
        if gens.is_empty() {
            return Err(StoreError::NoImage { job_id });
        }
        for &g in gens.iter().rev() {
            match self.read_generation(job_id, g) {
                Ok(img) => return Ok(img),
                Err(StoreError::AllCopiesCorrupt { .. }) | Err(StoreError::NoImage { .. }) => {
                    warn!("job {job_id}: generation {g} unreadable, falling back");
                }
                Err(e) => return Err(e),
            }
        }
        Err(StoreError::AllCopiesCorrupt { job_id })
    }

    pub fn verify(&self, job_id: u64, generation: u32) -> Result<Vec<CopyVerdict>, StoreError> {
        let verdicts: Vec<CopyVerdict> = (0..self.redundancy)
            .map(|copy| {
                let path = self.copy_path(job_id, generation, copy);
                let status = match self.load_copy(&path, job_id, generation) {
                    Ok(_) => CopyStatus::Ok,
                    Err(s) => s,
                };
                CopyVerdict { copy, path, status }
            })
            .collect();
        if verdicts.iter().all(|v| v.status == CopyStatus::Missing) {
            return Err(StoreError::NoImage { job_id });
        }
        Ok(verdicts)
    }

    /// Keep the newest `keep` generations; returns the removed ones.
    pub fn prune(&self, job_id: u64) -> Result<Vec<u32>, StoreError> {
        let gens = self.generations(job_id)?;
        let cut = gens.len().saturating_sub(self.keep as usize);
        let doomed = gens[..cut].to_vec();
        for &g in &doomed {
            self.remove_generation(job_id, g)?;
        }
        Ok(doomed)
    }

    /// Remove every generation above `generation`, e.g. images of a round
    /// that never committed. Returns the removed generations.
    pub fn discard_above(&self, job_id: u64, generation: u32) -> Result<Vec<u32>, StoreError> {
        let doomed: Vec<u32> = self.generations(job_id)?.into_iter().filter(|&g| g > generation).collect();
        for &g in &doomed {
            self.remove_generation(job_id, g)?;
        }
        self.clear_temps(job_id)?;
        Ok(doomed)
    }

    /// Remove leftover temporary files from interrupted writes.
    pub fn clear_temps(&self, job_id: u64) -> Result<usize, StoreError> {
        let dir = self.job_dir(job_id);
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(0),
            Err(e) => return Err(StoreError::io(&dir, e)),
        };
        let mut n = 0;
        for entry in entries.flatten() {
            let name = entry.file_name();
            if name.to_str().is_some_and(|s| s.starts_with('.') && s.ends_with(".ckpt.tmp")) {
                fs::remove_file(entry.path()).map_err(|e| StoreError::io(&entry.path(), e))?;
                n += 1;
            }
        }
        Ok(n)
    }

    fn remove_generation(&self, job_id: u64, generation: u32) -> Result<(), StoreError> {
        // copies beyond the current redundancy may exist from an older policy
        let dir = self.job_dir(job_id);
        let prefix = format!("gen{generation}.copy");
        for entry in fs::read_dir(&dir).map_err(|e| StoreError::io(&dir, e))?.flatten() {
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            if name.starts_with(&prefix) && parse_copy_name(name).is_some_and(|(g, _)| g == generation) {
                fs::remove_file(entry.path()).map_err(|e| StoreError::io(&entry.path(), e))?;
            }
        }
        sync_dir(&dir).map_err(|e| StoreError::io(&dir, e))
    }

    fn load_copy(&self, path: &Path, job_id: u64, generation: u32) -> Result<CheckpointImage, CopyStatus> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(CopyStatus::Missing),
            Err(_) => return Err(CopyStatus::Corrupt),
        };
        match CheckpointImage::decode(&bytes) {
            Ok(img) if img.job_id == job_id && img.generation == generation => Ok(img),
            _ => Err(CopyStatus::Corrupt),
        }
    }
}

fn parse_copy_name(name: &str) -> Option<(u32, u32)> {
    let rest = name.strip_prefix("gen")?.strip_suffix(".ckpt")?;
    let (g, c) = rest.split_once(".copy")?;
    if g.is_empty() || c.is_empty() || !g.bytes().chain(c.bytes()).all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((g.parse().ok()?, c.parse().ok()?))
}

fn write_synced(path: &Path, data: &[u8]) -> io::Result<()> {
    let mut f = OpenOptions::new().create(true).truncate(true).write(true).open(path)?;
    f.write_all(data)?;
    f.sync_all()
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    File::open(dir)?.sync_all()
}
