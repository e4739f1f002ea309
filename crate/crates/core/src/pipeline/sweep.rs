use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{prepare_data, train_and_evaluate, write_json, Runner, SPLIT_MANIFEST};
use crate::error::{Error, Result};
use crate::model::Task;
use crate::retrieval::{embed_dataset, eval_knn};
use crate::training::{ablation_suite, AblationReport};
use crate::phantom::Split;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRow {
    pub channels: usize,
    pub experiment_dir: PathBuf,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSweepReport {
    pub rows: Vec<ChannelRow>,
}

impl ChannelSweepReport {
    /// One line per width, one column per metric.
    pub fn table(&self) -> String {
        let columns: BTreeSet<&String> = self.rows.iter().flat_map(|r| r.metrics.keys()).collect();
        let mut out = format!("{:>8}", "C");
        for c in &columns {
            write!(out, " {c:>14}").expect("string write");
        }
        out.push('\n');
        for r in &self.rows {
            write!(out, "{:>8}", r.channels).expect("string write");
            for c in &columns {
                match r.metrics.get(*c) {
                    Some(v) => write!(out, " {v:>14.4}"),
                    None => write!(out, " {:>14}", "-"),
                }
                .expect("string write");
            }
            out.push('\n');
        }
        out
    }
}

/// Train and evaluate one model per embedding width on a shared dataset.
/// Each width runs in `output_root/channels/c<C>/` with the same seeds.
pub fn channel_sweep(config: &ExperimentConfig, channels: &[usize]) -> Result<ChannelSweepReport> {
    if channels.is_empty() {
        return Err(Error::config("channels", "at least one channel count is required"));
    }
    if channels.contains(&0) {
        return Err(Error::config("channels", "channel counts must be positive"));
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = channels.iter().find(|c| !seen.insert(**c)) {
        return Err(Error::config("channels", format!("duplicate channel count {dup}")));
    }
    let cfg = config.resolved();
    cfg.validate()?;
    cfg.prepare_output_root()?;
    let root = cfg.output_root.clone();
    write_json(&root.join("config.json"), &cfg)?;
    let mut data = Runner::new(&root);
    prepare_data(&mut data, &cfg)?;
    let manifest = data.path(SPLIT_MANIFEST);

    let mut rows = Vec::with_capacity(channels.len());
    for &c in channels {
        let mut sub = cfg.clone();
        sub.model.channels = c;
        sub.validate()?;
        let dir = root.join("channels").join(format!("c{c}"));
        log::info!("channel sweep: C = {c}");
        let mut r = Runner::new(&dir);
        let report = train_and_evaluate(&mut r, &sub, &manifest)?;
        rows.push(ChannelRow {
            channels: c,
            experiment_dir: dir,
            metrics: report.metrics(),
        });
    }
    let report = ChannelSweepReport { rows };
    write_json(&root.join("channel_sweep.json"), &report)?;
    let path = root.join("channel_sweep.txt");
    std::fs::write(&path, report.table()).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Train one model per task subset on a shared dataset, then embed and
/// evaluate each at the configured K. Writes `output_root/ablation/`.
pub fn ablation(config: &ExperimentConfig, subsets: &[Vec<Task>]) -> Result<AblationReport> {
    let cfg = config.resolved();
    cfg.validate()?;
    cfg.prepare_output_root()?;
    let root = cfg.output_root.clone();
    write_json(&root.join("config.json"), &cfg)?;
    let mut data = Runner::new(&root);
    prepare_data(&mut data, &cfg)?;
    let manifest = data.path(SPLIT_MANIFEST);

    let out = root.join("ablation");
    let (mut report, _) = ablation_suite(&manifest, &cfg.model, &cfg.train, subsets, &out)?;
    let patch = cfg.retrieval.inference_patch;
    for row in &mut report.rows {
        let train = embed_dataset(&row.checkpoint, &manifest, Some(Split::Train), patch)?;
        let test = embed_dataset(&row.checkpoint, &manifest, Some(Split::Test), patch)?;
        row.metrics = eval_knn(&train, &test, cfg.retrieval.k, &Task::CLASSIFICATION)?.metrics();
    }
    write_json(&out.join("ablation.json"), &report)?;
    let path = out.join("ablation.txt");
    std::fs::write(&path, report.table()).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
