//! The multitask network: backbone, segmentation head, RoiPool and linear
//! classification heads, plus checkpoint I/O.

mod checkpoint;
mod network;
mod roipool;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_SCHEMA_VERSION};
pub use network::{ModelOutput, Network, TumorOutput};
pub use roipool::{roipool, roipool_backward};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A supervised task; every task but segmentation is a per-tumor classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Segmentation,
    Type,
    Region,
    LeftRight,
    FrontRear,
    UpperLower,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Segmentation,
        Task::Type,
        Task::Region,
        Task::LeftRight,
        Task::FrontRear,
        Task::UpperLower,
    ];

    pub const CLASSIFICATION: [Task; 5] = [
        Task::Type,
        Task::Region,
        Task::LeftRight,
        Task::FrontRear,
        Task::UpperLower,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Segmentation => "segmentation",
            Task::Type => "type",
            Task::Region => "region",
            Task::LeftRight => "left_right",
            Task::FrontRear => "front_rear",
            Task::UpperLower => "upper_lower",
        }
    }

    pub fn is_classification(self) -> bool {
        self != Task::Segmentation
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config("task", format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width C.
    pub channels: usize,
    pub n_resblocks: usize,
    pub down_up_factor: usize,
    pub n_types: usize,
    pub n_regions: usize,
    pub enabled_tasks: Vec<Task>,
    /// Initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            n_resblocks: 4,
            down_up_factor: 4,
            n_types: 3,
            n_regions: 11,
            enabled_tasks: Task::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("channels", "must be at least 1"));
        }
        if self.down_up_factor == 0 {
            return Err(Error::config("down_up_factor", "must be positive"));
        }
        if self.n_types < 2 {
            return Err(Error::config("n_types", "need at least 2 classes"));
        }
        if self.n_regions < 2 {
            return Err(Error::config("n_regions", "need at least 2 classes"));
        }
        if self.enabled_tasks.is_empty() {
            return Err(Error::config("enabled_tasks", "must not be empty"));
        }
        Ok(())
    }

    pub fn n_classes(&self, task: Task) -> Option<usize> {
        match task {
            Task::Segmentation => None,
            Task::Type => Some(self.n_types),
            Task::Region => Some(self.n_regions),
            Task::LeftRight | Task::FrontRear | Task::UpperLower => Some(2),
        }
    }

    pub fn stem_channels(&self) -> usize {
        (self.channels / 2).max(1)
    }

    pub fn is_enabled(&self, task: Task) -> bool {
        self.enabled_tasks.contains(&task)
    }
}
