use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::eval::{eval_knn, KnnEvalReport};
use super::table::embed_manifest;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::hashing::file_sha256;
use crate::model::{load_checkpoint, Task};
use crate::phantom::{load_manifest, Split};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistortionParams {
    /// Std of log2 of the per-axis scale factor.
    pub sigma_log2_scale: f64,
    /// Std of the per-axis translation as a fraction of the box side.
    pub sigma_translation_fraction: f64,
    pub seed: u64,
}

impl Default for DistortionParams {
    fn default() -> Self {
        Self {
            sigma_log2_scale: 1.0 / 3.0,
            sigma_translation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl DistortionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_log2_scale >= 0.0) || !self.sigma_log2_scale.is_finite() {
            return Err(Error::config("sigma_log2_scale", "must be finite and >= 0"));
        }
        if !(self.sigma_translation_fraction >= 0.0) || !self.sigma_translation_fraction.is_finite() {
            return Err(Error::config("sigma_translation_fraction", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Per-axis random draws of one distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionDraw {
    pub log2_scale: [f64; 3],
    pub translation_fraction: [f64; 3],
}

impl DistortionDraw {
    pub fn sample<R: Rng + ?Sized>(params: &DistortionParams, rng: &mut R) -> Self {
        let mut d = Self {
            log2_scale: [0.0; 3],
            translation_fraction: [0.0; 3],
        };
        for a in 0..3 {
            let g: f64 = rng.sample(StandardNormal);
            let h: f64 = rng.sample(StandardNormal);
            d.log2_scale[a] = params.sigma_log2_scale * g;
            d.translation_fraction[a] = params.sigma_translation_fraction * h;
        }
        d
    }

    /// Scale each half-width about the center, shift the center by a
    /// fraction of the side, round bounds half away from zero, clip, and keep
    /// at least one voxel per axis.
    pub fn apply(&self, bbox: &BBox, shape: [usize; 3]) -> BBox {
        let mut start = [0i64; 3];
        let mut stop = [0i64; 3];
        for a in 0..3 {
            let side = bbox.side(a) as f64;
            let center = 0.5 * (bbox.start[a] + bbox.stop[a]) as f64;
            let half = 0.5 * side * self.log2_scale[a].exp2();
            let c = center + side * self.translation_fraction[a];
            let v = shape[a] as i64;
            let mut lo = ((c - half).round() as i64).clamp(0, v);
            let mut hi = ((c + half).round() as i64).clamp(0, v);
            if hi - lo < 1 {
                if lo >= v {
                    lo = v - 1;
                    hi = v;
                } else {
                    hi = lo + 1;
                }
            }
            start[a] = lo;
            stop[a] = hi;
        }
        BBox { start, stop }
    }
}

pub fn distort_bbox<R: Rng + ?Sized>(
    bbox: &BBox,
    shape: [usize; 3],
    params: &DistortionParams,
    rng: &mut R,
) -> BBox {
    DistortionDraw::sample(params, rng).apply(bbox, shape)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortedBox {
    pub tumor_id: String,
    pub clean: BBox,
    pub distorted: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    pub params: DistortionParams,
    pub clean: KnnEvalReport,
    pub distorted: KnnEvalReport,
    /// Distorted minus clean, per metric.
    pub deltas: BTreeMap<String, f64>,
    pub boxes: Vec<DistortedBox>,
}

/// Train table from clean boxes; test tumors embedded from clean and from
/// distorted boxes and evaluated identically.
pub fn eval_distortion(
    checkpoint: &Path,
    manifest_path: &Path,
    params: &DistortionParams,
    k: usize,
    min_patch: usize,
) -> Result<DistortionReport> {
    params.validate()?;
    let mut net = load_checkpoint::<f32>(checkpoint)?;
    let fp = file_sha256(checkpoint)?;
    let (manifest, base) = load_manifest(manifest_path)?;
    let clean_box = |r: &crate::phantom::TumorRecord, _| r.bbox;
    let train = embed_manifest(&mut net, &fp, &manifest, &base, Some(Split::Train), min_patch, clean_box)?;
    let test_clean =
        embed_manifest(&mut net, &fp, &manifest, &base, Some(Split::Test), min_patch, clean_box)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut boxes = Vec::new();
    let test_distorted = embed_manifest(
        &mut net,
        &fp,
        &manifest,
        &base,
        Some(Split::Test),
        min_patch,
        |r, shape| {
            let d = distort_bbox(&r.bbox, shape, params, &mut rng);
            boxes.push(DistortedBox {
                tumor_id: r.tumor_id.clone(),
                clean: r.bbox,
                distorted: d,
            });
            d
        },
    )?;
    let tasks = Task::CLASSIFICATION;
    let clean = eval_knn(&train, &test_clean, k, &tasks)?;
    let distorted = eval_knn(&train, &test_distorted, k, &tasks)?;
    Ok(paired_report(*params, clean, distorted, boxes))
}

fn paired_report(
    params: DistortionParams,
    clean: KnnEvalReport,
    distorted: KnnEvalReport,
    boxes: Vec<DistortedBox>,
) -> DistortionReport {
    let c = clean.metrics();
    let d = distorted.metrics();
    let deltas = c
        .iter()
        .filter_map(|(name, v)| d.get(name).map(|w| (name.clone(), w - v)))
        .collect();
    DistortionReport {
        params,
        clean,
        distorted,
        deltas,
        boxes,
    }
}
