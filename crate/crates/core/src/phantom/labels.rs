use serde::{Deserialize, Serialize};

use super::volume::SegmentationTarget;
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Labels that follow from a single tumor's mask geometry.
///
/// Binary labels use 0 for left/front/lower and 1 for right/rear/upper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedLabels {
    pub bbox: BBox,
    pub linear_size_mm: f64,
    pub left_right: u8,
    pub front_rear: u8,
    pub upper_lower: u8,
    pub region_label: u16,
}

/// Derive bbox, linear size, localization and region from one tumor's mask.
pub fn derive_labels(
    mask: &SegmentationTarget,
    spacing_mm: [f64; 3],
    n_regions: usize,
) -> Result<DerivedLabels> {
    let shape = mask.shape;
    let bbox = mask
        .tight_bbox()
        .ok_or_else(|| Error::Data("no tumor voxels".into()))?;

    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for x in bbox.start[0]..bbox.stop[0] {
        for y in bbox.start[1]..bbox.stop[1] {
            for z in bbox.start[2]..bbox.stop[2] {
                if mask.mask[mask.index(x as usize, y as usize, z as usize)] != 0 {
                    sum[0] += x as f64;
                    sum[1] += y as f64;
                    sum[2] += z as f64;
                    count += 1;
                }
            }
        }
    }
    let centroid = sum.map(|s| s / count as f64);

    let linear_size_mm = (0..3)
        .map(|a| bbox.side(a) as f64 * spacing_mm[a])
        .fold(0.0, f64::max);
    let side = |a: usize| u8::from(centroid[a] > midplane(shape[a]));

    Ok(DerivedLabels {
        bbox,
        linear_size_mm,
        left_right: side(0),
        front_rear: side(1),
        upper_lower: side(2),
        region_label: region_of_centroid(centroid, shape, n_regions),
    })
}

/// Midplane in voxel-index coordinates; a centroid exactly on it goes to
/// the lower-index side.
fn midplane(n: usize) -> f64 {
    (n as f64 - 1.0) / 2.0
}

/// Spatial partition cell containing `centroid`.
///
/// With 11 regions: a central sphere (normalized radius < 0.25) split into
/// three lower/middle/upper slabs (cells 8..=10), and the eight octants
/// around it (cells 0..=7, bit 0 = right, bit 1 = rear, bit 2 = upper).
/// Any other count uses equal front-to-rear slabs.
pub fn region_of_centroid(centroid: [f64; 3], shape: [usize; 3], n_regions: usize) -> u16 {
    let u: [f64; 3] =
        std::array::from_fn(|a| (centroid[a] - midplane(shape[a])) / (shape[a] as f64 / 2.0));
    if n_regions == 11 {
        let r = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        if r < 0.25 {
            return if u[2] <= -1.0 / 12.0 {
                8
            } else if u[2] <= 1.0 / 12.0 {
                9
            } else {
                10
            };
        }
        let bit = |v: f64| u16::from(v > 0.0);
        bit(u[0]) | (bit(u[1]) << 1) | (bit(u[2]) << 2)
    } else {
        let t = ((u[1] + 1.0) / 2.0).clamp(0.0, 1.0);
        ((t * n_regions as f64).ceil() as usize).clamp(1, n_regions) as u16 - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_voxel() {
        let mut m = SegmentationTarget::zeros([64, 64, 64]);
        let i = m.index(2, 3, 4);
        m.mask[i] = 1;
        let l = derive_labels(&m, [1.0; 3], 11).unwrap();
        assert_eq!(l.bbox, BBox::new([2, 3, 4], [3, 4, 5]).unwrap());
        assert_eq!(l.linear_size_mm, 1.0);
        assert_eq!((l.left_right, l.front_rear, l.upper_lower), (0, 0, 0));
        assert_eq!(l.region_label, 0);
    }

    #[test]
    fn empty_mask_errors() {
        let m = SegmentationTarget::zeros([8, 8, 8]);
        let err = derive_labels(&m, [1.0; 3], 11).unwrap_err();
        assert!(err.to_string().contains("no tumor voxels"));
    }

    #[test]
    fn midplane_tie_goes_low() {
        // Two voxels straddling the midplane of an even axis put the
        // centroid exactly on it.
        let mut m = SegmentationTarget::zeros([8, 8, 8]);
        for x in [3, 4] {
            for y in [3, 4] {
                for z in [3, 4] {
                    let i = m.index(x, y, z);
                    m.mask[i] = 1;
                }
            }
        }
        let l = derive_labels(&m, [1.0; 3], 11).unwrap();
        assert_eq!((l.left_right, l.front_rear, l.upper_lower), (0, 0, 0));
        assert_eq!(l.region_label, 9);
    }

    #[test]
    fn anisotropic_spacing_scales_size() {
        let mut m = SegmentationTarget::zeros([16, 16, 16]);
        for x in 2..6 {
            for z in 2..4 {
                let i = m.index(x, 5, z);
                m.mask[i] = 1;
            }
        }
        let l = derive_labels(&m, [1.0, 1.0, 3.0], 11).unwrap();
        assert_eq!(l.linear_size_mm, 6.0);
    }

    #[test]
    fn analytic_sphere_size() {
        // Rasterization oracle: voxels whose centers lie within radius 5 of
        // the volume center span 9..=11 voxels per axis.
        let n = 64;
        let c = (n as f64 - 1.0) / 2.0;
        for offset in [0.0, 0.25, 0.5] {
            let mut m = SegmentationTarget::zeros([n, n, n]);
            for x in 0..n {
                for y in 0..n {
                    for z in 0..n {
                        let d = [x as f64 - c - offset, y as f64 - c, z as f64 - c + offset];
                        if d.iter().map(|v| v * v).sum::<f64>() <= 25.0 {
                            let i = m.index(x, y, z);
                            m.mask[i] = 1;
                        }
                    }
                }
            }
            let size = derive_labels(&m, [1.0; 3], 11).unwrap().linear_size_mm;
            assert!((9.0..=11.0).contains(&size), "size {size}");
        }
    }

    #[test]
    fn eleven_cells_all_reachable() {
        let shape = [64, 64, 64];
        let mut seen = std::collections::BTreeSet::new();
        for x in (0..64).step_by(3) {
            for y in (0..64).step_by(3) {
                for z in (0..64).step_by(3) {
                    seen.insert(region_of_centroid([x as f64, y as f64, z as f64], shape, 11));
                }
            }
        }
        assert_eq!(seen.len(), 11);
        assert!(seen.iter().all(|&r| r < 11));
        for n in [2, 5] {
            for y in 0..64 {
                assert!(region_of_centroid([0.0, y as f64, 0.0], shape, n) < n as u16);
            }
        }
    }
}
