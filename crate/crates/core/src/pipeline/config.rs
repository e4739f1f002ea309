use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::phantom::PhantomConfig;
use crate::retrieval::DistortionParams;
use crate::training::TrainConfig;
use crate::viz::ProjectionConfig;

/// Environment variable that replaces `output_root` when set.
pub const OUTPUT_ROOT_ENV: &str = "TUMORLAB_OUTPUT_ROOT";

/// Module whose random stream can be seeded independently of the global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedScope {
    Phantom,
    Split,
    Model,
    Train,
    Distortion,
    Projection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSettings {
    pub test_fraction: f64,
    pub k: usize,
    pub sweep_ks: Vec<usize>,
    /// Minimum side of the cube embedded around each box.
    pub inference_patch: usize,
    pub distortion: DistortionParams,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            k: 5,
            sweep_ks: (1..=10).collect(),
            inference_patch: 64,
            distortion: DistortionParams::default(),
        }
    }
}

/// Which tumors the 2D projection covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TsneScope {
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VizSettings {
    pub projection: ProjectionConfig,
    pub tsne_scope: TsneScope,
    pub panel_k: usize,
    /// Query tumors for montages; when empty, the first test tumor of each type.
    pub panel_queries: Vec<String>,
}

impl Default for VizSettings {
    fn default() -> Self {
        Self {
            projection: ProjectionConfig::default(),
            tsne_scope: TsneScope::All,
            panel_k: 2,
            panel_queries: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub phantom: PhantomConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub retrieval: RetrievalSettings,
    pub viz: VizSettings,
    pub output_root: PathBuf,
    /// Seeds every module not listed in `seed_overrides`.
    pub seed: u64,
    pub seed_overrides: BTreeMap<SeedScope, u64>,
}

impl Default for ExperimentConfig {
    /// The desk-scale experiment: 120 phantoms of 64^3, C = 16, 10 epochs.
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            model: ModelConfig {
                channels: 16,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            retrieval: RetrievalSettings::default(),
            viz: VizSettings::default(),
            output_root: PathBuf::from("experiments/desk"),
            seed: 0,
            seed_overrides: BTreeMap::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn seed_for(&self, scope: SeedScope) -> u64 {
        self.seed_overrides.get(&scope).copied().unwrap_or(self.seed)
    }

    /// Copy with every module seed replaced by its resolved value.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.phantom.seed = self.seed_for(SeedScope::Phantom);
        c.model.seed = self.seed_for(SeedScope::Model);
        c.train.seed = self.seed_for(SeedScope::Train);
        c.retrieval.distortion.seed = self.seed_for(SeedScope::Distortion);
        c.viz.projection.seed = self.seed_for(SeedScope::Projection);
        c
    }

    /// Checks the sub-configs without touching the filesystem.
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.model.validate()?;
        self.train.validate(self.model.down_up_factor)?;
        if self.model.n_regions != self.phantom.n_regions {
            return Err(Error::config(
                "model.n_regions",
                format!(
                    "model predicts {} regions but the phantom labels {}",
                    self.model.n_regions, self.phantom.n_regions
                ),
            ));
        }
        let r = &self.retrieval;
        if !(r.test_fraction > 0.0 && r.test_fraction < 1.0) {
            return Err(Error::config("retrieval.test_fraction", "must lie in (0, 1)"));
        }
        if r.k == 0 || r.sweep_ks.is_empty() || r.sweep_ks.contains(&0) {
            return Err(Error::config("retrieval.k", "K values must be positive and the sweep nonempty"));
        }
        if r.inference_patch == 0 {
            return Err(Error::config("retrieval.inference_patch", "must be positive"));
        }
        r.distortion.validate()?;
        if self.viz.panel_k == 0 {
            return Err(Error::config("viz.panel_k", "must be positive"));
        }
        if self.output_root.as_os_str().is_empty() {
            return Err(Error::config("output_root", "must not be empty"));
        }
        Ok(())
    }

    /// Creates the output root and proves it writable.
    pub fn prepare_output_root(&self) -> Result<()> {
        let root = &self.output_root;
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let probe = root.join(".write_probe");
        std::fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
        std::fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_seed_reaches_every_module_unless_overridden() {
        let mut c = ExperimentConfig {
            seed: 7,
            ..ExperimentConfig::default()
        };
        c.seed_overrides.insert(SeedScope::Train, 99);
        let r = c.resolved();
        assert_eq!(r.phantom.seed, 7);
        assert_eq!(r.model.seed, 7);
        assert_eq!(r.train.seed, 99);
        assert_eq!(r.retrieval.distortion.seed, 7);
        assert_eq!(r.viz.projection.seed, 7);
        assert_eq!(r.seed_for(SeedScope::Split), 7);
    }

    #[test]
    fn round_trips_through_json_with_partial_input() {
        let c: ExperimentConfig =
            serde_json::from_str(r#"{"seed": 3, "seed_overrides": {"phantom": 4}, "model": {"channels": 8}}"#)
                .unwrap();
        assert_eq!(c.model.channels, 8);
        assert_eq!(c.model.n_resblocks, ModelConfig::default().n_resblocks);
        assert_eq!(c.seed_for(SeedScope::Phantom), 4);
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn validation_catches_bad_fields() {
        let mut c = ExperimentConfig::default();
        assert!(c.validate().is_ok());
        c.retrieval.k = 0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.model.n_regions = 5;
        assert!(c.validate().unwrap_err().to_string().contains("n_regions"));
    }
}
