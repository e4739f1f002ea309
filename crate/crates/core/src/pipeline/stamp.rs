use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{file_sha256, ContentHasher};

/// Record left by a completed stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub input_hash: String,
    /// Paths relative to the experiment directory.
    pub outputs: Vec<PathBuf>,
}

impl Stamp {
    pub fn path(dir: &Path, stage: &str) -> PathBuf {
        dir.join("stamps").join(format!("{stage}.json"))
    }

    pub fn read(dir: &Path, stage: &str) -> Option<Self> {
        let text = std::fs::read_to_string(Self::path(dir, stage)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = Self::path(dir, &self.stage);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("stage stamp", e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// True when the stamp was made from the same inputs and every output
    /// is still on disk.
    pub fn is_current(&self, dir: &Path, input_hash: &str) -> bool {
        self.input_hash == input_hash && self.outputs.iter().all(|p| dir.join(p).exists())
    }
}

/// Hash of a stage's settings plus the contents of the files it reads.
pub(crate) struct InputHash {
    hasher: ContentHasher,
}

impl InputHash {
    pub fn new(stage: &str) -> Self {
        let mut hasher = ContentHasher::new();
        hasher.part("stage", stage.as_bytes());
        Self { hasher }
    }

    pub fn value<T: Serialize>(mut self, label: &str, v: &T) -> Result<Self> {
        let bytes = serde_json::to_vec(v).map_err(|e| Error::json(label, e))?;
        self.hasher.part(label, &bytes);
        Ok(self)
    }

    pub fn file(mut self, label: &str, path: &Path) -> Result<Self> {
        let h = file_sha256(path)?;
        self.hasher.part(label, h.as_bytes());
        Ok(self)
    }

    pub fn finish(self) -> String {
        self.hasher.finish()
    }
}
