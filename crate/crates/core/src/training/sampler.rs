use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::phantom::{SegmentationTarget, TumorRecord, Volume};

/// A tumor fully visible in a patch, with its box in patch coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RebasedTumor {
    pub record: TumorRecord,
    pub bbox: BBox,
}

#[derive(Debug, Clone)]
pub struct PatchSample {
    /// Patch origin in volume coordinates.
    pub origin: [usize; 3],
    pub size: [usize; 3],
    pub patch: Vec<f32>,
    pub mask: Vec<u8>,
    /// Tumors entirely inside the patch. Partially visible tumors are left
    /// out here but keep their voxels in `mask`.
    pub tumors: Vec<RebasedTumor>,
}

/// Draw an anchor tumor uniformly, then a uniformly random patch position
/// that keeps the anchor's box entirely inside the patch and the patch
/// inside the volume.
pub fn sample_patch<R: Rng + ?Sized>(
    volume: &Volume,
    mask: &SegmentationTarget,
    records: &[TumorRecord],
    patch_size: [usize; 3],
    rng: &mut R,
) -> Result<PatchSample> {
    if records.is_empty() {
        return Err(Error::Data("image has no tumors to anchor a patch".into()));
    }
    if mask.shape != volume.shape {
        return Err(Error::Shape("mask and volume shapes differ".into()));
    }
    for a in 0..3 {
        if patch_size[a] > volume.shape[a] {
            return Err(Error::Shape(format!(
                "patch side {} exceeds volume side {} on axis {a}",
                patch_size[a], volume.shape[a]
            )));
        }
    }
    let anchor = &records[rng.gen_range(0..records.len())];
    let mut origin = [0usize; 3];
    for a in 0..3 {
        let side = anchor.bbox.side(a) as usize;
        if side > patch_size[a] {
            return Err(Error::Data(format!(
                "tumor exceeds patch size: {} has side {side} > {} on axis {a}",
                anchor.tumor_id, patch_size[a]
            )));
        }
        let lo = (anchor.bbox.stop[a] - patch_size[a] as i64).max(0);
        let hi = anchor.bbox.start[a].min((volume.shape[a] - patch_size[a]) as i64);
        origin[a] = rng.gen_range(lo..=hi) as usize;
    }
    let window = BBox {
        start: origin.map(|v| v as i64),
        stop: std::array::from_fn(|a| (origin[a] + patch_size[a]) as i64),
    };
    let tumors = records
        .iter()
        .filter(|r| window.contains(&r.bbox))
        .map(|r| RebasedTumor {
            record: r.clone(),
            bbox: r.bbox.translate(window.start.map(|v| -v)),
        })
        .collect();
    Ok(PatchSample {
        origin,
        size: patch_size,
        patch: volume.crop(&window),
        mask: mask.crop(&window),
        tumors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::TumorType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(id: &str, start: [i64; 3], stop: [i64; 3]) -> TumorRecord {
        TumorRecord {
            tumor_id: id.into(),
            image_id: "img".into(),
            bbox: BBox::new(start, stop).unwrap(),
            type_label: TumorType::Metastasis,
            region_label: Some(0),
            left_right: Some(0),
            front_rear: Some(0),
            upper_lower: Some(0),
            linear_size_mm: 10.0,
        }
    }

    #[test]
    fn anchor_always_contained() {
        let vol = Volume::zeros([64; 3], [1.0; 3]);
        let mask = SegmentationTarget::zeros([64; 3]);
        let recs = [record("a", [10; 3], [20; 3])];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = BBox::new([0; 3], [32; 3]).unwrap();
        for _ in 0..1000 {
            let s = sample_patch(&vol, &mask, &recs, [32; 3], &mut rng).unwrap();
            assert_eq!(s.tumors.len(), 1);
            assert!(full.contains(&s.tumors[0].bbox));
            assert_eq!(s.patch.len(), 32 * 32 * 32);
        }
    }

    #[test]
    fn whole_volume_patch_returns_everything() {
        let vol = Volume::zeros([32; 3], [1.0; 3]);
        let mask = SegmentationTarget::zeros([32; 3]);
        let recs = [record("a", [1; 3], [5; 3]), record("b", [20; 3], [31; 3])];
        let s = sample_patch(&vol, &mask, &recs, [32; 3], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(s.origin, [0; 3]);
        assert_eq!(s.tumors.len(), 2);
        assert_eq!(s.tumors[1].bbox, recs[1].bbox);
    }

    #[test]
    fn oversized_tumor_errors() {
        let vol = Volume::zeros([64; 3], [1.0; 3]);
        let mask = SegmentationTarget::zeros([64; 3]);
        let recs = [record("big", [0; 3], [40, 10, 10])];
        let err = sample_patch(&vol, &mask, &recs, [32; 3], &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap_err();
        assert!(err.to_string().contains("tumor exceeds patch size"));
    }

    #[test]
    fn partial_tumors_keep_mask_voxels_only() {
        let vol = Volume::zeros([48; 3], [1.0; 3]);
        let mut mask = SegmentationTarget::zeros([48; 3]);
        for x in 20..40 {
            let i = mask.index(x, 5, 5);
            mask.mask[i] = 1;
        }
        let recs = [record("anchor", [0; 3], [10; 3]), record("long", [20, 5, 5], [40, 6, 6])];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut saw_partial = false;
        for _ in 0..200 {
            let s = sample_patch(&vol, &mask, &recs[..], [32; 3], &mut rng).unwrap();
            if s.tumors.iter().all(|t| t.record.tumor_id != "long")
                && s.mask.iter().any(|&m| m == 1)
            {
                saw_partial = true;
            }
        }
        assert!(saw_partial);
    }
}
