use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

/// Persisted `committed_generation` of one coordinator, replaced
/// atomically after every commit.
#[derive(Debug, Clone)]
pub struct StateFile {
    path: PathBuf,
}

impl StateFile {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Missing file reads as generation 0.
    pub fn load(&self) -> io::Result<u32> {
        let text = match fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(0),
            Err(e) => return Err(e),
        };
        text.lines()
            .find_map(|l| l.trim().strip_prefix("committed_generation="))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| {
                io::Error::new(io::ErrorKind::InvalidData, format!("bad state file {}", self.path.display()))
            })
    }

    pub fn save(&self, committed: u32) -> io::Result<()> {
        write_atomic(&self.path, format!("committed_generation={committed}\n").as_bytes())
    }
}

/// Write `data` to a sibling temp file, fsync, then rename over `path`.
pub fn write_atomic(path: &Path, data: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("state");
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(data)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    fs::File::open(dir)?.sync_all()
}
