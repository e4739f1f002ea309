use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{PhantomConfig, TumorType};
use super::labels::derive_labels;
use super::synth::{synth_brain, synth_tumor};
use super::volume::{SegmentationTarget, Volume};
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Size redraws allowed before a tumor is dropped from its image.
const SIZE_REDRAWS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Unassigned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TumorRecord {
    pub tumor_id: String,
    pub image_id: String,
    pub bbox: BBox,
    pub type_label: TumorType,
    pub region_label: Option<u16>,
    /// 0 = left, 1 = right.
    pub left_right: Option<u8>,
    /// 0 = front, 1 = rear.
    pub front_rear: Option<u8>,
    /// 0 = lower, 1 = upper.
    pub upper_lower: Option<u8>,
    pub linear_size_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: String,
    pub volume_path: PathBuf,
    pub mask_path: PathBuf,
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub split: Split,
    pub tumors: Vec<TumorRecord>,
}

impl ImageEntry {
    pub fn load_volume(&self, base: &Path) -> Result<Volume> {
        Volume::read_raw(&base.join(&self.volume_path), self.shape, self.spacing_mm)
    }

    pub fn load_mask(&self, base: &Path) -> Result<SegmentationTarget> {
        SegmentationTarget::read_raw(&base.join(&self.mask_path), self.shape)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub config: PhantomConfig,
    pub images: Vec<ImageEntry>,
}

impl DatasetManifest {
    pub fn tumors(&self) -> impl Iterator<Item = &TumorRecord> {
        self.images.iter().flat_map(|i| i.tumors.iter())
    }

    pub fn images_in(&self, split: Option<Split>) -> impl Iterator<Item = &ImageEntry> {
        self.images
            .iter()
            .filter(move |i| split.map_or(true, |s| i.split == s))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "unsupported manifest schema_version {}",
                self.schema_version
            )));
        }
        let mut seen = HashSet::new();
        for image in &self.images {
            for t in &image.tumors {
                if !seen.insert(t.tumor_id.as_str()) {
                    return Err(Error::Data(format!("duplicate tumor_id {}", t.tumor_id)));
                }
                if t.image_id != image.image_id {
                    return Err(Error::Data(format!(
                        "tumor {} claims image {} but is listed under {}",
                        t.tumor_id, t.image_id, image.image_id
                    )));
                }
                t.bbox.validate()?;
            }
        }
        Ok(())
    }
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json("manifest", e))?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Load a manifest; returns it with the directory its paths are relative to.
pub fn load_manifest(path: &Path) -> Result<(DatasetManifest, PathBuf)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    manifest.validate()?;
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((manifest, base))
}

fn draw_type<R: Rng + ?Sized>(rng: &mut R, priors: &[f64; 3]) -> TumorType {
    let u: f64 = rng.gen();
    if u < priors[0] {
        TumorType::Metastasis
    } else if u < priors[0] + priors[1] {
        TumorType::Meningioma
    } else {
        TumorType::Schwannoma
    }
}

/// Generate one image from its own random stream.
pub fn generate_image(
    config: &PhantomConfig,
    index: usize,
) -> Result<(Volume, SegmentationTarget, Vec<TumorRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let image_id = format!("img{index:04}");

    let brain = synth_brain(&mut rng, config);
    let mut volume = brain.volume.clone();
    let mut occupied = SegmentationTarget::zeros(config.volume_shape);
    let noise = (config.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, config.noise_sigma).expect("validated sigma"));

    let [lo, hi] = config.tumors_per_image;
    let n_tumors = rng.gen_range(lo..=hi);
    let mut fragments = Vec::with_capacity(n_tumors);
    for _ in 0..n_tumors {
        let tumor_type = draw_type(&mut rng, &config.type_priors);
        for _ in 0..SIZE_REDRAWS {
            if let Ok(frag) = synth_tumor(&mut rng, tumor_type, config, &brain, Some(&occupied)) {
                for (p, intensity) in frag.voxels() {
                    let i = volume.index(p[0], p[1], p[2]);
                    let jitter = noise.map_or(0.0, |n| n.sample(&mut rng));
                    volume.data[i] = (intensity as f64 + jitter) as f32;
                    occupied.mask[i] = 1;
                }
                fragments.push(frag);
                break;
            }
        }
    }
    if fragments.is_empty() {
        return Err(Error::Data(format!(
            "image {image_id}: no tumor fits; enlarge the volume or shrink size_range_mm"
        )));
    }

    let mut records = Vec::with_capacity(fragments.len());
    for (j, frag) in fragments.iter().enumerate() {
        let labels = derive_labels(
            &frag.to_mask(config.volume_shape),
            config.voxel_spacing_mm,
            config.n_regions,
        )?;
        let mut keep = || rng.gen::<f64>() >= config.missing_label_rate;
        let region_label = keep().then_some(labels.region_label);
        let left_right = keep().then_some(labels.left_right);
        let front_rear = keep().then_some(labels.front_rear);
        let upper_lower = keep().then_some(labels.upper_lower);
        records.push(TumorRecord {
            tumor_id: format!("{image_id}_t{j}"),
            image_id: image_id.clone(),
            bbox: labels.bbox,
            type_label: frag.tumor_type,
            region_label,
            left_right,
            front_rear,
            upper_lower,
            linear_size_mm: labels.linear_size_mm,
        });
    }
    Ok((volume, occupied, records))
}

/// Write `n_images` volumes, masks and `manifest.json` under `out_dir`.
pub fn generate_dataset(config: &PhantomConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    for sub in ["volumes", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut images = Vec::with_capacity(config.n_images);
    for index in 0..config.n_images {
        let (volume, mask, tumors) = generate_image(config, index)?;
        let image_id = format!("img{index:04}");
        let volume_path = PathBuf::from("volumes").join(format!("{image_id}.f32"));
        let mask_path = PathBuf::from("masks").join(format!("{image_id}.u8"));
        volume.write_raw(&out_dir.join(&volume_path))?;
        mask.write_raw(&out_dir.join(&mask_path))?;
        images.push(ImageEntry {
            image_id,
            volume_path,
            mask_path,
            shape: config.volume_shape,
            spacing_mm: config.voxel_spacing_mm,
            split: Split::Unassigned,
            tumors,
        });
    }
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config: config.clone(),
        images,
    };
    save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Tag whole images as train or test; never splits an image's tumors.
pub fn split_dataset(
    manifest: &DatasetManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if manifest.images.len() < 5 {
        return Err(Error::Data(format!(
            "too few images to split: {} (need at least 5)",
            manifest.images.len()
        )));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::config("test_fraction", "must lie in [0, 1)"));
    }
    let n = manifest.images.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test: HashSet<usize> = order[..n_test].iter().copied().collect();

    let mut out = manifest.clone();
    for (i, image) in out.images.iter_mut().enumerate() {
        image.split = if test.contains(&i) {
            Split::Test
        } else {
            Split::Train
        };
    }
    Ok(out)
}
