use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VidError {
    #[error("no mapping for original id {0}; resource was not re-registered after restart")]
    UnknownId(u64),
    #[error("current id {current} already mapped from original id {owner}")]
    IdCollision { current: u64, owner: u64 },
}

/// Maps a job's original resource ids to their current equivalents.
/// Injective: two originals never share a current id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VirtualIdTable {
    forward: BTreeMap<u64, u64>,
    reverse: BTreeMap<u64, u64>,
}

impl VirtualIdTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Map `original` to `current`, replacing any previous mapping for
    /// `original`. Returns the replaced current id.
    pub fn register(&mut self, original: u64, current: u64) -> Result<Option<u64>, VidError> {
        if let Some(&owner) = self.reverse.get(&current) {
            if owner != original {
                return Err(VidError::IdCollision { current, owner });
            }
        }
        let old = self.forward.insert(original, current);
        if let Some(old) = old {
            self.reverse.remove(&old);
        }
        self.reverse.insert(current, original);
        Ok(old)
    }

    pub fn remap(&self, original: u64) -> Result<u64, VidError> {
        self.forward.get(&original).copied().ok_or(VidError::UnknownId(original))
    }

    pub fn unregister(&mut self, original: u64) -> Option<u64> {
        let cur = self.forward.remove(&original)?;
        self.reverse.remove(&cur);
        Some(cur)
    }

    /// Drop every mapping; the restarted job re-registers its resources.
    pub fn clear(&mut self) {
        self.forward.clear();
        self.reverse.clear();
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.forward.iter().map(|(a, b)| (*a, *b))
    }
}

/// Free-function form of [`VirtualIdTable::remap`].
pub fn remap_id(t: &VirtualIdTable, original: u64) -> Result<u64, VidError> {
    t.remap(original)
}
