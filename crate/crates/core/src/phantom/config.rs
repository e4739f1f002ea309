use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TumorType {
    Metastasis,
    Meningioma,
    Schwannoma,
}

impl TumorType {
    pub const ALL: [TumorType; 3] = [
        TumorType::Metastasis,
        TumorType::Meningioma,
        TumorType::Schwannoma,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TumorType::Metastasis => "metastasis",
            TumorType::Meningioma => "meningioma",
            TumorType::Schwannoma => "schwannoma",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub volume_shape: [usize; 3],
    pub voxel_spacing_mm: [f64; 3],
    pub n_images: usize,
    /// Inclusive range of tumors per image.
    pub tumors_per_image: [usize; 2],
    /// Probabilities over metastasis, meningioma, schwannoma.
    pub type_priors: [f64; 3],
    /// Inclusive range of tumor diameters.
    pub size_range_mm: [f64; 2],
    pub n_regions: usize,
    pub noise_sigma: f64,
    /// Probability that each non-type label of a tumor is absent.
    pub missing_label_rate: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            volume_shape: [64, 64, 64],
            voxel_spacing_mm: [1.0, 1.0, 1.0],
            n_images: 120,
            tumors_per_image: [1, 3],
            type_priors: [0.40, 0.35, 0.25],
            size_range_mm: [4.0, 20.0],
            n_regions: 11,
            noise_sigma: 0.03,
            missing_label_rate: 0.05,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.volume_shape.iter().any(|&n| n < 8) {
            return Err(Error::config("volume_shape", "every axis needs at least 8 voxels"));
        }
        if self
            .voxel_spacing_mm
            .iter()
            .any(|s| !s.is_finite() || *s <= 0.0)
        {
            return Err(Error::config("voxel_spacing_mm", "spacings must be positive"));
        }
        if self.n_images == 0 {
            return Err(Error::config("n_images", "must be positive"));
        }
        let [lo, hi] = self.tumors_per_image;
        if lo == 0 || hi < lo {
            return Err(Error::config(
                "tumors_per_image",
                format!("need 1 <= min <= max, got [{lo}, {hi}]"),
            ));
        }
        if self.type_priors.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::config("type_priors", "probabilities must be non-negative"));
        }
        let total: f64 = self.type_priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "type_priors",
                format!("must sum to 1, got {total}"),
            ));
        }
        let [smin, smax] = self.size_range_mm;
        let max_spacing = self.voxel_spacing_mm.iter().cloned().fold(0.0, f64::max);
        if !(smin.is_finite() && smax.is_finite()) || smin > smax {
            return Err(Error::config("size_range_mm", "need min <= max"));
        }
        if smin < 2.0 * max_spacing {
            return Err(Error::config(
                "size_range_mm",
                format!("minimum diameter {smin} mm is below 2 voxels ({} mm)", 2.0 * max_spacing),
            ));
        }
        if self.n_regions < 2 {
            return Err(Error::config("n_regions", "need at least 2 regions"));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::config("noise_sigma", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.missing_label_rate) {
            return Err(Error::config("missing_label_rate", "must lie in [0, 1]"));
        }
        Ok(())
    }
}
