use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{PhantomConfig, TumorType};
use super::volume::{SegmentationTarget, Volume};
use crate::geometry::BBox;

/// Mean intensity of brain tissue before texture and noise.
const TISSUE_LEVEL: f64 = 0.45;
const CSF_LEVEL: f64 = 0.12;
/// Tumor voxels must stay within this normalized radius of the brain.
const BRAIN_MARGIN: f64 = 0.95;
const PLACEMENT_ATTEMPTS: usize = 100;

/// Axis-aligned ellipsoid in voxel-index coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    pub fn normalized_radius(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| {
                let t = (p[a] - self.center[a]) / self.semi_axes[a];
                t * t
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.normalized_radius(p) <= 1.0
    }
}

#[derive(Debug, Clone)]
pub struct Brain {
    pub volume: Volume,
    pub ellipsoid: Ellipsoid,
}

/// Build a brain-like volume: an ellipsoid of tissue with low-frequency
/// texture, a dark midline fissure and two ventricles, on a zero background,
/// plus Gaussian noise of `noise_sigma` everywhere.
pub fn synth_brain<R: Rng + ?Sized>(rng: &mut R, config: &PhantomConfig) -> Brain {
    let shape = config.volume_shape;
    let center: [f64; 3] = std::array::from_fn(|a| (shape[a] as f64 - 1.0) / 2.0);
    let semi_axes: [f64; 3] =
        std::array::from_fn(|a| rng.gen_range(0.60..0.80) * shape[a] as f64 / 2.0);
    let ellipsoid = Ellipsoid { center, semi_axes };

    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            let k: [f64; 3] = std::array::from_fn(|a| {
                2.0 * PI * rng.gen_range(0.5..2.0) / shape[a] as f64
            });
            (k, rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let ventricles: [Ellipsoid; 2] = [-1.0, 1.0].map(|side| Ellipsoid {
        center: [
            center[0] + side * 0.22 * semi_axes[0],
            center[1] - 0.05 * semi_axes[1],
            center[2] + 0.10 * semi_axes[2],
        ],
        semi_axes: [0.10 * semi_axes[0], 0.30 * semi_axes[1], 0.12 * semi_axes[2]],
    });

    let mut volume = Volume::zeros(shape, config.voxel_spacing_mm);
    for x in 0..shape[0] {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                let p = [x as f64, y as f64, z as f64];
                if !ellipsoid.contains(p) {
                    continue;
                }
                let value = if (p[0] - center[0]).abs() <= 0.5
                    || ventricles.iter().any(|v| v.contains(p))
                {
                    CSF_LEVEL
                } else {
                    let texture: f64 = waves
                        .iter()
                        .map(|(k, phase)| {
                            0.03 * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos()
                        })
                        .sum();
                    TISSUE_LEVEL + texture
                };
                let i = volume.index(x, y, z);
                volume.data[i] = value as f32;
            }
        }
    }
    if config.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
        for v in volume.data.iter_mut() {
            *v += noise.sample(rng) as f32;
        }
    }
    Brain { volume, ellipsoid }
}

/// Analytic tumor geometry; distances are in millimeters from the blob center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlobShape {
    /// Ellipsoid with per-axis semi-axes.
    Ellipsoid { semi_axes_mm: [f64; 3] },
    /// Sphere whose radius is modulated by a smooth angular lobe pattern
    /// with factor in [0.7, 1].
    Lobulated { radius_mm: f64, phases: [f64; 2] },
}

impl BlobShape {
    /// Normalized radius: <= 1 inside the blob.
    pub fn normalized(&self, d: [f64; 3]) -> f64 {
        match self {
            BlobShape::Ellipsoid { semi_axes_mm } => (0..3)
                .map(|a| (d[a] / semi_axes_mm[a]).powi(2))
                .sum::<f64>()
                .sqrt(),
            BlobShape::Lobulated { radius_mm, phases } => {
                let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                if r == 0.0 {
                    return 0.0;
                }
                let azimuth = d[1].atan2(d[0]);
                let polar = (d[2] / r).clamp(-1.0, 1.0).acos();
                let lobe = (3.0 * azimuth + phases[0]).cos() * (2.0 * polar + phases[1]).cos();
                r / (radius_mm * (0.85 + 0.15 * lobe))
            }
        }
    }

    /// Largest distance from the center to the blob surface.
    pub fn reach_mm(&self) -> f64 {
        match self {
            BlobShape::Ellipsoid { semi_axes_mm } => semi_axes_mm.iter().cloned().fold(0.0, f64::max),
            BlobShape::Lobulated { radius_mm, .. } => *radius_mm,
        }
    }
}

/// One placed tumor: geometry plus a mask and clean intensity patch over
/// its tight bounding box.
#[derive(Debug, Clone)]
pub struct TumorFragment {
    pub tumor_type: TumorType,
    pub diameter_mm: f64,
    /// Blob center in voxel-index coordinates.
    pub center: [f64; 3],
    pub shape: BlobShape,
    pub bbox: BBox,
    pub mask: Vec<u8>,
    pub intensity: Vec<f32>,
}

impl TumorFragment {
    pub fn voxels(&self) -> impl Iterator<Item = ([usize; 3], f32)> + '_ {
        let s = self.bbox.sides().map(|v| v as usize);
        let start = self.bbox.start;
        (0..self.mask.len()).filter(move |&i| self.mask[i] != 0).map(move |i| {
            let p = [
                start[0] as usize + i / (s[1] * s[2]),
                start[1] as usize + (i / s[2]) % s[1],
                start[2] as usize + i % s[2],
            ];
            (p, self.intensity[i])
        })
    }

    pub fn to_mask(&self, shape: [usize; 3]) -> SegmentationTarget {
        let mut m = SegmentationTarget::zeros(shape);
        for (p, _) in self.voxels() {
            let i = m.index(p[0], p[1], p[2]);
            m.mask[i] = 1;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacementFailed {
    pub attempts: usize,
}

impl std::fmt::Display for PlacementFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "tumor did not fit inside the brain after {} attempts", self.attempts)
    }
}

impl std::error::Error for PlacementFailed {}

/// Schwannoma anchor sites, mirrored across the left/right midplane.
pub fn schwannoma_anchors(brain: &Ellipsoid) -> [[f64; 3]; 2] {
    [-1.0, 1.0].map(|side| {
        [
            brain.center[0] + side * 0.5 * brain.semi_axes[0],
            brain.center[1] + 0.30 * brain.semi_axes[1],
            brain.center[2] - 0.25 * brain.semi_axes[2],
        ]
    })
}

/// Draw one tumor of `tumor_type` with a uniformly drawn diameter and place
/// it by rejection sampling.
///
/// A placement is accepted when every mask voxel lies inside the brain
/// margin, the mask stays on one side of the midline fissure, and no voxel
/// touches (26-neighborhood) an `occupied` voxel.
/// After 100 failed positions the caller should redraw.
pub fn synth_tumor<R: Rng + ?Sized>(
    rng: &mut R,
    tumor_type: TumorType,
    config: &PhantomConfig,
    brain: &Brain,
    occupied: Option<&SegmentationTarget>,
) -> Result<TumorFragment, PlacementFailed> {
    let [smin, smax] = config.size_range_mm;
    let diameter_mm = if smax > smin { rng.gen_range(smin..=smax) } else { smin };
    let r = diameter_mm / 2.0;
    let spacing = config.voxel_spacing_mm;
    let ell = &brain.ellipsoid;

    let shape = match tumor_type {
        TumorType::Metastasis => BlobShape::Ellipsoid {
            semi_axes_mm: [r, r, r * rng.gen_range(0.8..=1.0)],
        },
        TumorType::Meningioma => BlobShape::Lobulated {
            radius_mm: r,
            phases: [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)],
        },
        TumorType::Schwannoma => BlobShape::Ellipsoid {
            semi_axes_mm: [r, 0.6 * r, 0.6 * r],
        },
    };
    let reach_vox = shape.reach_mm() / spacing.iter().cloned().fold(f64::INFINITY, f64::min);

    for _ in 0..PLACEMENT_ATTEMPTS {
        let center = match tumor_type {
            TumorType::Metastasis => loop {
                let p: [f64; 3] = std::array::from_fn(|a| {
                    ell.center[a] + ell.semi_axes[a] * rng.gen_range(-1.0..1.0)
                });
                if ell.normalized_radius(p) <= 0.85 {
                    break p;
                }
            },
            TumorType::Meningioma => {
                let mut u: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
                let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                u.iter_mut().for_each(|v| *v /= norm);
                let to_surface = 1.0
                    / (0..3)
                        .map(|a| (u[a] / ell.semi_axes[a]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                let outer = to_surface * rng.gen_range(0.86..0.95);
                std::array::from_fn(|a| ell.center[a] + u[a] * (outer - reach_vox))
            }
            TumorType::Schwannoma => {
                let anchors = schwannoma_anchors(ell);
                let anchor = anchors[usize::from(rng.gen_bool(0.5))];
                std::array::from_fn(|a| {
                    anchor[a] + 0.06 * ell.semi_axes[a] * rng.gen_range(-1.0..=1.0)
                })
            }
        };
        if let Some(fragment) =
            rasterize(tumor_type, diameter_mm, center, &shape, brain, occupied, config)
        {
            return Ok(fragment);
        }
    }
    Err(PlacementFailed {
        attempts: PLACEMENT_ATTEMPTS,
    })
}

fn tumor_intensity(tumor_type: TumorType, rho: f64, d_mm: [f64; 3], noise_sigma: f64) -> f64 {
    let floor = 3.5 * noise_sigma;
    match tumor_type {
        // Ring enhancement around a darker necrotic core.
        TumorType::Metastasis => {
            if rho > 0.6 {
                TISSUE_LEVEL + 0.55f64.max(floor)
            } else {
                TISSUE_LEVEL - 0.23f64.max(floor)
            }
        }
        TumorType::Meningioma => TISSUE_LEVEL + (0.37 - 0.04 * rho).max(floor),
        TumorType::Schwannoma => {
            TISSUE_LEVEL + (0.18 + 0.05 * (2.0 * PI * d_mm[0] / 4.0).cos()).max(floor)
        }
    }
}

fn rasterize(
    tumor_type: TumorType,
    diameter_mm: f64,
    center: [f64; 3],
    shape: &BlobShape,
    brain: &Brain,
    occupied: Option<&SegmentationTarget>,
    config: &PhantomConfig,
) -> Option<TumorFragment> {
    let vol_shape = config.volume_shape;
    let spacing = config.voxel_spacing_mm;
    let reach = shape.reach_mm();
    let window = BBox {
        start: std::array::from_fn(|a| (center[a] - reach / spacing[a]).floor() as i64 - 1),
        stop: std::array::from_fn(|a| (center[a] + reach / spacing[a]).ceil() as i64 + 2),
    };
    let s = window.sides().map(|v| v as usize);
    let mut member = vec![0u8; s.iter().product()];
    for i in 0..s[0] {
        for j in 0..s[1] {
            for k in 0..s[2] {
                let p = [
                    (window.start[0] + i as i64) as f64,
                    (window.start[1] + j as i64) as f64,
                    (window.start[2] + k as i64) as f64,
                ];
                let d: [f64; 3] = std::array::from_fn(|a| (p[a] - center[a]) * spacing[a]);
                if shape.normalized(d) <= 1.0 {
                    member[(i * s[1] + j) * s[2] + k] = 1;
                }
            }
        }
    }

    // Keep the 6-connected component holding the voxel nearest the center.
    let (labels, n_components) = connected_components(&member, s);
    if n_components == 0 {
        return None;
    }
    let nearest: [usize; 3] =
        std::array::from_fn(|a| (center[a].round() as i64 - window.start[a]).clamp(0, s[a] as i64 - 1) as usize);
    let mut keep = labels[(nearest[0] * s[1] + nearest[1]) * s[2] + nearest[2]];
    if keep == 0 {
        let mut sizes = vec![0usize; n_components + 1];
        labels.iter().for_each(|&l| sizes[l as usize] += 1);
        keep = (1..=n_components).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c)))? as u32;
    }
    for (m, &l) in member.iter_mut().zip(&labels) {
        *m = u8::from(l == keep);
    }

    let local = BBox::tight(&member, s)?;
    let bbox = local.translate(window.start);
    if !bbox.is_within(vol_shape) {
        return None;
    }
    // Tumors stay within one hemisphere and never touch the fissure.
    let mid = brain.ellipsoid.center[0];
    if bbox.start[0] as f64 <= mid + 0.5 && (bbox.stop[0] - 1) as f64 >= mid - 0.5 {
        return None;
    }
    let sides = bbox.sides().map(|v| v as usize);
    let mut mask = vec![0u8; sides.iter().product()];
    let mut intensity = vec![0f32; mask.len()];
    for i in 0..sides[0] {
        for j in 0..sides[1] {
            for k in 0..sides[2] {
                let li = [
                    i + local.start[0] as usize,
                    j + local.start[1] as usize,
                    k + local.start[2] as usize,
                ];
                if member[(li[0] * s[1] + li[1]) * s[2] + li[2]] == 0 {
                    continue;
                }
                let p = [
                    bbox.start[0] as usize + i,
                    bbox.start[1] as usize + j,
                    bbox.start[2] as usize + k,
                ];
                let pf = p.map(|v| v as f64);
                if brain.ellipsoid.normalized_radius(pf) > BRAIN_MARGIN {
                    return None;
                }
                if let Some(occ) = occupied {
                    if touches(occ, p) {
                        return None;
                    }
                }
                let d: [f64; 3] = std::array::from_fn(|a| (pf[a] - center[a]) * spacing[a]);
                let out = (i * sides[1] + j) * sides[2] + k;
                mask[out] = 1;
                intensity[out] =
                    tumor_intensity(tumor_type, shape.normalized(d), d, config.noise_sigma) as f32;
            }
        }
    }
    Some(TumorFragment {
        tumor_type,
        diameter_mm,
        center,
        shape: shape.clone(),
        bbox,
        mask,
        intensity,
    })
}

fn touches(occ: &SegmentationTarget, p: [usize; 3]) -> bool {
    let sh = occ.shape;
    for dx in -1i64..=1 {
        for dy in -1i64..=1 {
            for dz in -1i64..=1 {
                let q = [p[0] as i64 + dx, p[1] as i64 + dy, p[2] as i64 + dz];
                if (0..3).any(|a| q[a] < 0 || q[a] >= sh[a] as i64) {
                    continue;
                }
                if occ.mask[occ.index(q[0] as usize, q[1] as usize, q[2] as usize)] != 0 {
                    return true;
                }
            }
        }
    }
    false
}

/// 6-connected component labelling; labels start at 1, background is 0.
pub fn connected_components(mask: &[u8], shape: [usize; 3]) -> (Vec<u32>, usize) {
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    let idx = |p: [usize; 3]| (p[0] * shape[1] + p[1]) * shape[2] + p[2];
    for start in 0..mask.len() {
        if mask[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let p = [i / (shape[1] * shape[2]), (i / shape[2]) % shape[1], i % shape[2]];
            for a in 0..3 {
                for step in [-1i64, 1] {
                    let v = p[a] as i64 + step;
                    if v < 0 || v >= shape[a] as i64 {
                        continue;
                    }
                    let mut q = p;
                    q[a] = v as usize;
                    let j = idx(q);
                    if mask[j] != 0 && labels[j] == 0 {
                        labels[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    (labels, next as usize)
}
