use std::collections::BTreeSet;

use proptest::prelude::*;
use tumorlab::phantom::{generate_dataset, generate_image, split_dataset, PhantomConfig, Split};
use tumorlab::retrieval::{DistortionDraw, RetrievalIndex};
use tumorlab::BBox;

fn small() -> PhantomConfig {
    PhantomConfig {
        volume_shape: [32, 32, 32],
        n_images: 10,
        size_range_mm: [3.0, 8.0],
        ..PhantomConfig::default()
    }
}

#[test]
fn images_are_reproducible_and_independent_of_order() {
    let cfg = small();
    let (v1, m1, t1) = generate_image(&cfg, 3).unwrap();
    let (v2, m2, t2) = generate_image(&cfg, 3).unwrap();
    assert_eq!(v1.data, v2.data);
    assert_eq!(m1.mask, m2.mask);
    assert_eq!(t1, t2);
    let other = PhantomConfig { seed: 1, ..cfg };
    assert_ne!(generate_image(&other, 3).unwrap().0.data, v1.data);
}

#[test]
fn every_tumor_box_lies_in_the_volume_and_covers_mask() {
    let cfg = small();
    let [nx, ny, nz] = cfg.volume_shape;
    for i in 0..cfg.n_images {
        let (_, mask, tumors) = generate_image(&cfg, i).unwrap();
        assert!(!tumors.is_empty());
        assert!(tumors.len() <= cfg.tumors_per_image[1]);
        let mut covered = 0;
        for t in &tumors {
            assert!(t.bbox.is_within(cfg.volume_shape), "{}", t.tumor_id);
            assert!(t.linear_size_mm > 0.0);
            let mut inside = 0;
            for x in t.bbox.start[0]..t.bbox.stop[0] {
                for y in t.bbox.start[1]..t.bbox.stop[1] {
                    for z in t.bbox.start[2]..t.bbox.stop[2] {
                        inside += usize::from(mask.mask[mask.index(x as usize, y as usize, z as usize)]);
                    }
                }
            }
            assert!(inside > 0, "{} has an empty box", t.tumor_id);
            covered += inside;
        }
        // Boxes may overlap, so this bounds rather than equals the mask size.
        assert!(covered >= mask.count());
        assert!(mask.count() < nx * ny * nz);
    }
}

#[test]
fn split_keeps_images_whole_and_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&small(), dir.path()).unwrap();
    assert!(dir.path().join("manifest.json").exists());
    let a = split_dataset(&m, 0.2, 4).unwrap();
    let b = split_dataset(&m, 0.2, 4).unwrap();
    assert_eq!(a, b);
    let test: BTreeSet<&str> = a
        .images
        .iter()
        .filter(|i| i.split == Split::Test)
        .map(|i| i.image_id.as_str())
        .collect();
    assert_eq!(test.len(), 2);
    assert!(a.images.iter().all(|i| i.split != Split::Unassigned));
    for img in &a.images {
        assert!(img.tumors.iter().all(|t| t.image_id == img.image_id));
    }
}

fn arb_box(side: i64) -> impl Strategy<Value = BBox> {
    prop::array::uniform3((0..side - 1, 1..side)).prop_map(move |pairs| {
        let mut start = [0; 3];
        let mut stop = [0; 3];
        for (a, (s, len)) in pairs.into_iter().enumerate() {
            start[a] = s;
            stop[a] = (s + len).min(side).max(s + 1);
        }
        BBox::new(start, stop).unwrap()
    })
}

proptest! {
    #[test]
    fn distorted_boxes_stay_valid(
        b in arb_box(40),
        scale in prop::array::uniform3(-3.0f64..3.0),
        shift in prop::array::uniform3(-2.0f64..2.0),
    ) {
        let d = DistortionDraw { log2_scale: scale, translation_fraction: shift };
        let out = d.apply(&b, [40, 40, 40]);
        prop_assert!(out.is_within([40, 40, 40]));
        prop_assert!(out.sides().iter().all(|&s| s >= 1));
        let identity = DistortionDraw { log2_scale: [0.0; 3], translation_fraction: [0.0; 3] };
        prop_assert_eq!(identity.apply(&b, [40, 40, 40]), b);
    }

    #[test]
    fn every_stored_vector_is_its_own_nearest_neighbor(
        points in prop::collection::vec(prop::array::uniform3(-10.0f32..10.0), 1..30),
    ) {
        let mut t = tumorlab::retrieval::EmbeddingTable::new("p".into(), 3);
        for (i, p) in points.iter().enumerate() {
            let row = tumorlab::retrieval::TableRow {
                tumor_id: format!("t{i:02}"),
                image_id: format!("i{i:02}"),
                bbox: BBox::new([0; 3], [1; 3]).unwrap(),
                labels: Default::default(),
                linear_size_mm: 1.0,
            };
            t.push(row, p).unwrap();
        }
        let index = RetrievalIndex::new(t, false).unwrap();
        for p in &points {
            let r = index.query(p, 1, None).unwrap();
            prop_assert_eq!(r.neighbors[0].distance, 0.0);
        }
    }
}
