use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{multitask_loss, LossBreakdown, TaskLabels};
use super::optimizer::Sgd;
use super::sampler::sample_patch;
use super::{lr_at, TrainConfig};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::{roipool, save_checkpoint, ModelConfig, Network, Task};
use crate::nn::{Mode, Scalar, Tensor};
use crate::phantom::{load_manifest, SegmentationTarget, Split, TumorRecord, Volume};

/// One image held in memory for patch sampling.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub image_id: String,
    pub volume: Volume,
    pub mask: SegmentationTarget,
    pub records: Vec<TumorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's batches.
    pub loss: LossBreakdown,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub enabled_tasks: Vec<Task>,
    pub param_count: usize,
    pub n_train_images: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

/// Load every image of `split` (all images when `None`) that has tumors.
pub fn load_training_data(manifest_path: &Path, split: Option<Split>) -> Result<Vec<LoadedImage>> {
    let (manifest, base) = load_manifest(manifest_path)?;
    let mut out = Vec::new();
    for entry in manifest.images_in(split) {
        if entry.tumors.is_empty() {
            continue;
        }
        out.push(LoadedImage {
            image_id: entry.image_id.clone(),
            volume: entry.load_volume(&base)?,
            mask: entry.load_mask(&base)?,
            records: entry.tumors.clone(),
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "no images with tumors in split {split:?}"
        )));
    }
    Ok(out)
}

pub(crate) fn task_labels(record: &TumorRecord) -> TaskLabels {
    let mut labels = TaskLabels::new();
    labels.insert(Task::Type, Some(record.type_label.index()));
    labels.insert(Task::Region, record.region_label.map(usize::from));
    labels.insert(Task::LeftRight, record.left_right.map(usize::from));
    labels.insert(Task::FrontRear, record.front_rear.map(usize::from));
    labels.insert(Task::UpperLower, record.upper_lower.map(usize::from));
    labels
}

/// Loss weight of each optimized task.
pub fn loss_weights(tasks: &[Task], config: &TrainConfig) -> BTreeMap<Task, f64> {
    tasks
        .iter()
        .map(|&t| {
            let w = if t == Task::Segmentation {
                config.lambda_s
            } else {
                config.lambda_p
            };
            (t, w)
        })
        .collect()
}

/// Tasks a run optimizes: the training override if set, else the model's list.
pub(crate) fn effective_tasks(model: &ModelConfig, config: &TrainConfig) -> Vec<Task> {
    let mut tasks = config
        .enabled_tasks
        .clone()
        .unwrap_or_else(|| model.enabled_tasks.clone());
    tasks.sort();
    tasks.dedup();
    tasks
}

struct Batch {
    input: Tensor<f64>,
    masks: Vec<Vec<u8>>,
    tumors: Vec<Vec<(BBox, TaskLabels)>>,
}

fn draw_batch<R: Rng>(data: &[LoadedImage], config: &TrainConfig, rng: &mut R) -> Result<Batch> {
    let b = config.batch_size;
    let [d, h, w] = config.patch_size;
    let mut input = Tensor::zeros([b, 1, d, h, w]);
    let mut masks = Vec::with_capacity(b);
    let mut tumors = Vec::with_capacity(b);
    for n in 0..b {
        let image = &data[rng.gen_range(0..data.len())];
        let s = sample_patch(&image.volume, &image.mask, &image.records, config.patch_size, rng)
            .map_err(|e| match e {
                Error::Data(m) => Error::Data(format!("{}: {m}", image.image_id)),
                other => other,
            })?;
        for (dst, &v) in input.sample_mut(n).iter_mut().zip(&s.patch) {
            *dst = f64::from(v);
        }
        masks.push(s.mask);
        tumors.push(
            s.tumors
                .iter()
                .map(|t| (t.bbox, task_labels(&t.record)))
                .collect(),
        );
    }
    Ok(Batch {
        input,
        masks,
        tumors,
    })
}

/// Forward and backward pass over a batch in training mode, adding
/// parameter gradients into `net` (which is not zeroed first). Gradients are
/// those of the mean per-sample loss, which is returned. When a loss term is
/// not finite the backward pass is skipped.
pub fn accumulate_gradients<T: Scalar>(
    net: &mut Network<T>,
    input: &Tensor<T>,
    masks: &[Vec<u8>],
    tumors: &[Vec<(BBox, TaskLabels)>],
    lambdas: &BTreeMap<Task, f64>,
) -> Result<LossBreakdown> {
    let b = input.batch();
    if masks.len() != b || tumors.len() != b {
        return Err(Error::Shape(format!(
            "batch of {b} with {} masks and {} tumor lists",
            masks.len(),
            tumors.len()
        )));
    }
    let scale = 1.0 / b as f64;
    let seg_on = lambdas.contains_key(&Task::Segmentation);
    let cls_tasks: Vec<Task> = lambdas.keys().copied().filter(|t| t.is_classification()).collect();

    let feat = net.backbone_forward(input, Mode::Train)?;
    let seg = seg_on.then(|| net.segmentation_head(&feat, Mode::Train));

    let mut dfeat = Tensor::<T>::zeros(feat.shape);
    let mut dseg = seg.as_ref().map(|s| Tensor::<T>::zeros(s.shape));
    let mut per_sample = Vec::with_capacity(b);
    for n in 0..b {
        let mut embeddings = Vec::new();
        let mut argmaxes = Vec::new();
        let mut logits = Vec::new();
        let mut labels = Vec::new();
        for (bbox, l) in &tumors[n] {
            let (emb, arg) = roipool(&feat, n, bbox)?;
            let mut out = BTreeMap::new();
            for &task in &cls_tasks {
                out.insert(task, net.classification_head(task, &emb)?);
            }
            embeddings.push(emb);
            argmaxes.push(arg);
            logits.push(out);
            labels.push(l.clone());
        }
        let (breakdown, grads) = multitask_loss(
            seg.as_ref().map(|s| s.sample(n)),
            &masks[n],
            &logits,
            &labels,
            lambdas,
        )?;
        per_sample.push(breakdown);

        if let (Some(dseg), Some(g)) = (dseg.as_mut(), grads.seg) {
            for (dst, v) in dseg.sample_mut(n).iter_mut().zip(g) {
                *dst = T::from_f64_lossy(v.to_f64().unwrap() * scale);
            }
        }
        for ((emb, arg), tumor_grads) in embeddings.iter().zip(&argmaxes).zip(grads.tumors) {
            let mut demb = vec![T::zero(); emb.len()];
            for (task, g) in tumor_grads {
                let g: Vec<T> = g
                    .iter()
                    .map(|v| T::from_f64_lossy(v.to_f64().unwrap() * scale))
                    .collect();
                let d = net.classification_head_backward(task, emb, &g)?;
                for (a, v) in demb.iter_mut().zip(d) {
                    *a = *a + v;
                }
            }
            crate::model::roipool_backward(&mut dfeat, arg, &demb);
        }
    }
    let mean = LossBreakdown::mean(&per_sample);
    if mean.non_finite_term().is_some() {
        net.clear_cache();
        return Ok(mean);
    }
    if let Some(dseg) = dseg {
        let d = net.segmentation_head_backward(&dseg);
        dfeat.add_assign(&d);
    }
    net.backbone_backward(&dfeat);
    net.clear_cache();
    Ok(mean)
}

/// One optimization step on a batch; returns the mean per-sample loss.
fn train_step<T: Scalar>(
    net: &mut Network<T>,
    batch: &Batch,
    lambdas: &BTreeMap<Task, f64>,
    opt: &mut Sgd,
    lr: f64,
) -> Result<LossBreakdown> {
    net.zero_grad();
    let input: Tensor<T> = batch.input.cast();
    let mean = accumulate_gradients(net, &input, &batch.masks, &batch.tumors, lambdas)?;
    if mean.non_finite_term().is_none() {
        opt.step(net, lr);
    }
    Ok(mean)
}

/// Train `net` in memory. `on_epoch` runs after every epoch and may save
/// checkpoints or log.
pub fn train_network<T: Scalar>(
    net: &mut Network<T>,
    data: &[LoadedImage],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &mut Network<T>) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    config.validate(net.config.down_up_factor)?;
    if data.is_empty() {
        return Err(Error::Data("no training images".into()));
    }
    let tasks = effective_tasks(&net.config, config);
    for t in &tasks {
        if t.is_classification() && !net.heads.contains_key(t) {
            return Err(Error::config("enabled_tasks", format!("model has no head for `{t}`")));
        }
    }
    let lambdas = loss_weights(&tasks, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Sgd::new(config.momentum, config.nesterov);
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config)?;
        let start = Instant::now();
        let mut losses = Vec::with_capacity(config.batches_per_epoch);
        for batch_idx in 0..config.batches_per_epoch {
            let batch = draw_batch(data, config, &mut rng)?;
            let loss = train_step(net, &batch, &lambdas, &mut opt, lr)?;
            if let Some(term) = loss.non_finite_term() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    term,
                });
            }
            losses.push(loss);
        }
        let record = EpochRecord {
            epoch,
            lr,
            loss: LossBreakdown::mean(&losses),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch} lr {lr:.4} loss {:.5} seg {:.5} ({:.1}s)",
            record.loss.total,
            record.loss.segmentation,
            record.seconds
        );
        on_epoch(&record, net)?;
        records.push(record);
    }
    Ok(records)
}

/// Train on the train split of a dataset, writing `train_log.jsonl`,
/// `best.ckpt`, `final.ckpt` and `report.json` into `out_dir`.
pub fn train(
    manifest_path: &Path,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainReport> {
    model_config.validate()?;
    train_config.validate(model_config.down_up_factor)?;
    let data = load_training_data(manifest_path, Some(Split::Train))?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut net = Network::<f32>::new(model_config)?;
    let param_count = net.param_count();
    let log_path = out_dir.join("train_log.jsonl");
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let best_path = out_dir.join("best.ckpt");
    let final_path = out_dir.join("final.ckpt");
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;

    let epochs = train_network(&mut net, &data, train_config, |record, net| {
        let line = serde_json::to_string(record).map_err(|e| Error::json("train log", e))?;
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if record.loss.total < best {
            best = record.loss.total;
            best_epoch = record.epoch;
            save_checkpoint(net, &best_path)?;
        }
        Ok(())
    })?;
    save_checkpoint(&mut net, &final_path)?;

    let report = TrainReport {
        model_config: model_config.clone(),
        train_config: train_config.clone(),
        enabled_tasks: effective_tasks(model_config, train_config),
        param_count,
        n_train_images: data.len(),
        epochs,
        best_epoch,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
    };
    let path = out_dir.join("report.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::json("train report", e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_image, PhantomConfig};

    fn tiny_data(n: usize) -> Vec<LoadedImage> {
        let config = PhantomConfig {
            volume_shape: [24; 3],
            size_range_mm: [3.0, 6.0],
            tumors_per_image: [1, 2],
            n_images: n,
            ..PhantomConfig::default()
        };
        (0..n)
            .map(|i| {
                let (volume, mask, records) = generate_image(&config, i).unwrap();
                LoadedImage {
                    image_id: format!("img{i:04}"),
                    volume,
                    mask,
                    records,
                }
            })
            .collect()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            channels: 4,
            n_resblocks: 1,
            ..ModelConfig::default()
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batches_per_epoch: 6,
            patch_size: [16; 3],
            lr_initial: 0.05,
            lr_drop_epochs: vec![],
            ..TrainConfig::default()
        }
    }

    fn snapshot(net: &mut Network<f64>, prefix: &str) -> Vec<f64> {
        let mut out = Vec::new();
        net.visit_params(&mut |name, p| {
            if name.starts_with(prefix) {
                out.extend_from_slice(&p.value);
            }
        });
        out
    }

    #[test]
    fn segmentation_only_leaves_heads_untouched() {
        let data = tiny_data(3);
        let mut net = Network::<f64>::new(&tiny_model()).unwrap();
        let heads = snapshot(&mut net, "head.");
        let backbone = snapshot(&mut net, "backbone.");
        let config = TrainConfig {
            enabled_tasks: Some(vec![Task::Segmentation]),
            ..tiny_train()
        };
        train_network(&mut net, &data, &config, |_, _| Ok(())).unwrap();
        assert_eq!(snapshot(&mut net, "head."), heads);
        assert_ne!(snapshot(&mut net, "backbone."), backbone);
    }

    #[test]
    fn zero_task_weight_matches_segmentation_only() {
        let data = tiny_data(3);
        let run = |config: TrainConfig| {
            let mut net = Network::<f64>::new(&tiny_model()).unwrap();
            train_network(&mut net, &data, &config, |_, _| Ok(())).unwrap();
            snapshot(&mut net, "backbone.")
        };
        let seg_only = run(TrainConfig {
            enabled_tasks: Some(vec![Task::Segmentation]),
            ..tiny_train()
        });
        let zero_weight = run(TrainConfig {
            lambda_p: 0.0,
            ..tiny_train()
        });
        let max_diff = seg_only
            .iter()
            .zip(&zero_weight)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-12, "max diff {max_diff}");
    }

    #[test]
    fn loss_falls_and_runs_are_deterministic() {
        let data = tiny_data(4);
        let run = || {
            let mut net = Network::<f32>::new(&tiny_model()).unwrap();
            train_network(&mut net, &data, &tiny_train(), |_, _| Ok(())).unwrap()
        };
        let a = run();
        let b = run();
        let totals: Vec<f64> = a.iter().map(|r| r.loss.total).collect();
        assert_eq!(totals, b.iter().map(|r| r.loss.total).collect::<Vec<_>>());
        assert!(totals[2] < totals[0], "{totals:?}");
    }

    #[test]
    fn divergence_is_reported() {
        let data = tiny_data(2);
        let mut net = Network::<f32>::new(&tiny_model()).unwrap();
        let config = TrainConfig {
            lr_initial: 1e30,
            ..tiny_train()
        };
        let err = train_network(&mut net, &data, &config, |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    }
}
