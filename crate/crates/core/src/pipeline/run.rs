use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, SeedScope, TsneScope};
use super::stamp::{InputHash, Stamp};
use crate::error::{Error, Result};
use crate::model::Task;
use crate::phantom::{generate_dataset, load_manifest, save_manifest, split_dataset, Split};
use crate::retrieval::{
    embed_dataset, eval_distortion, eval_knn, sweep_k, DistortionReport, EmbeddingTable,
    KnnEvalReport, RetrievalIndex,
};
use crate::training::train;
use crate::viz::{emit_k_sweep, emit_retrieval_panel, emit_scatter, project_table};

pub const STAGES: [&str; 9] = [
    "generate",
    "split",
    "train",
    "embed",
    "eval_knn",
    "sweep_k",
    "eval_distortion",
    "tsne",
    "panels",
];

pub(crate) const MANIFEST: &str = "data/manifest.json";
pub(crate) const SPLIT_MANIFEST: &str = "data/split.json";
pub(crate) const CHECKPOINT: &str = "train/final.ckpt";
pub(crate) const TRAIN_TABLE: &str = "tables/train.tbl";
pub(crate) const TEST_TABLE: &str = "tables/test.tbl";
pub(crate) const KNN_REPORT: &str = "eval/knn.json";
const SWEEP_DIR: &str = "sweep";
const DISTORTION_REPORT: &str = "distortion/report.json";
const TSNE_PNG: &str = "viz/tsne.png";
const PANEL_DIR: &str = "viz/panels";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    /// Reused from a current stamp.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub input_hash: String,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub experiment_dir: PathBuf,
    pub config: PathBuf,
    pub completed_stages: Vec<String>,
    pub stages: Vec<StageRecord>,
    /// KNN metrics at the configured K.
    pub metrics: BTreeMap<String, f64>,
    /// Distorted minus clean, per metric.
    pub distortion_deltas: BTreeMap<String, f64>,
    pub artifacts: BTreeMap<String, PathBuf>,
}

pub(crate) struct Runner {
    pub dir: PathBuf,
    pub records: Vec<StageRecord>,
}

impl Runner {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            records: Vec::new(),
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Run `body` unless a current stamp exists. `body` returns the paths it
    /// wrote, relative to the experiment directory.
    pub fn stage(
        &mut self,
        name: &str,
        hash: impl FnOnce() -> Result<InputHash>,
        body: impl FnOnce(&Path) -> Result<Vec<PathBuf>>,
    ) -> Result<()> {
        let wrap = |e: Error| Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
        };
        let input_hash = hash().map_err(wrap)?.finish();
        if let Some(stamp) = Stamp::read(&self.dir, name) {
            if stamp.is_current(&self.dir, &input_hash) {
                log::info!("stage {name}: up to date");
                self.records.push(StageRecord {
                    name: name.to_string(),
                    status: StageStatus::Skipped,
                    input_hash,
                    outputs: stamp.outputs,
                });
                return Ok(());
            }
        }
        log::info!("stage {name}: running");
        let outputs = body(&self.dir).map_err(wrap)?;
        let stamp = Stamp {
            stage: name.to_string(),
            input_hash: input_hash.clone(),
            outputs: outputs.clone(),
        };
        stamp.write(&self.dir).map_err(wrap)?;
        self.records.push(StageRecord {
            name: name.to_string(),
            status: StageStatus::Ran,
            input_hash,
            outputs,
        });
        Ok(())
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Stages `generate` and `split`.
pub(crate) fn prepare_data(r: &mut Runner, cfg: &ExperimentConfig) -> Result<()> {
    r.stage(
        "generate",
        || InputHash::new("generate").value("phantom", &cfg.phantom),
        |dir| {
            generate_dataset(&cfg.phantom, &dir.join("data"))?;
            Ok(vec![MANIFEST.into()])
        },
    )?;
    let seed = cfg.seed_for(SeedScope::Split);
    let fraction = cfg.retrieval.test_fraction;
    let manifest = r.path(MANIFEST);
    r.stage(
        "split",
        || {
            InputHash::new("split")
                .value("split", &(fraction, seed))?
                .file("manifest", &manifest)
        },
        |dir| {
            let (m, _) = load_manifest(&manifest)?;
            save_manifest(&split_dataset(&m, fraction, seed)?, &dir.join(SPLIT_MANIFEST))?;
            Ok(vec![SPLIT_MANIFEST.into()])
        },
    )
}

/// Stages `train`, `embed` and `eval_knn` against a split manifest that may
/// live outside the runner's directory.
pub(crate) fn train_and_evaluate(
    r: &mut Runner,
    cfg: &ExperimentConfig,
    split_manifest: &Path,
) -> Result<KnnEvalReport> {
    r.stage(
        "train",
        || {
            InputHash::new("train")
                .value("model", &cfg.model)?
                .value("train", &cfg.train)?
                .file("manifest", split_manifest)
        },
        |dir| {
            train(split_manifest, &cfg.model, &cfg.train, &dir.join("train"))?;
            Ok(vec![
                CHECKPOINT.into(),
                "train/report.json".into(),
                "train/train_log.jsonl".into(),
            ])
        },
    )?;
    let checkpoint = r.path(CHECKPOINT);
    let patch = cfg.retrieval.inference_patch;
    r.stage(
        "embed",
        || {
            InputHash::new("embed")
                .value("inference_patch", &patch)?
                .file("checkpoint", &checkpoint)?
                .file("manifest", split_manifest)
        },
        |dir| {
            for (split, rel) in [(Split::Train, TRAIN_TABLE), (Split::Test, TEST_TABLE)] {
                embed_dataset(&checkpoint, split_manifest, Some(split), patch)?.write(&dir.join(rel))?;
            }
            Ok(vec![TRAIN_TABLE.into(), TEST_TABLE.into()])
        },
    )?;
    let (train_table, test_table) = (r.path(TRAIN_TABLE), r.path(TEST_TABLE));
    let k = cfg.retrieval.k;
    r.stage(
        "eval_knn",
        || {
            InputHash::new("eval_knn")
                .value("k", &k)?
                .file("train", &train_table)?
                .file("test", &test_table)
        },
        |dir| {
            let train = EmbeddingTable::read(&train_table)?;
            let test = EmbeddingTable::read(&test_table)?;
            write_json(&dir.join(KNN_REPORT), &eval_knn(&train, &test, k, &Task::CLASSIFICATION)?)?;
            Ok(vec![KNN_REPORT.into()])
        },
    )?;
    read_json(&r.path(KNN_REPORT))
}

fn concat(a: &EmbeddingTable, b: &EmbeddingTable) -> Result<EmbeddingTable> {
    let mut t = a.clone();
    for (i, row) in b.rows.iter().enumerate() {
        t.push(row.clone(), b.vector(i))?;
    }
    Ok(t)
}

/// Query ids for montages: configured ones, or the first test tumor of each type.
fn panel_queries(cfg: &ExperimentConfig, test: &EmbeddingTable) -> Vec<String> {
    if !cfg.viz.panel_queries.is_empty() {
        return cfg.viz.panel_queries.clone();
    }
    let mut first: BTreeMap<usize, &str> = BTreeMap::new();
    for row in &test.rows {
        if let Some(t) = row.label(Task::Type) {
            first
                .entry(t)
                .and_modify(|id| *id = (*id).min(row.tumor_id.as_str()))
                .or_insert(&row.tumor_id);
        }
    }
    first.into_values().map(str::to_string).collect()
}

/// Run every stage into `config.output_root`, skipping stages whose stamps
/// are current, and write `summary.json`.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineSummary> {
    let cfg = config.resolved();
    cfg.validate()?;
    cfg.prepare_output_root()?;
    let dir = cfg.output_root.clone();
    write_json(&dir.join("config.json"), &cfg)?;

    let mut r = Runner::new(&dir);
    prepare_data(&mut r, &cfg)?;
    let split_manifest = r.path(SPLIT_MANIFEST);
    let knn = train_and_evaluate(&mut r, &cfg, &split_manifest)?;

    let (train_table, test_table) = (r.path(TRAIN_TABLE), r.path(TEST_TABLE));
    let ks = cfg.retrieval.sweep_ks.clone();
    r.stage(
        "sweep_k",
        || {
            InputHash::new("sweep_k")
                .value("ks", &ks)?
                .file("train", &train_table)?
                .file("test", &test_table)
        },
        |dir| {
            let train = EmbeddingTable::read(&train_table)?;
            let test = EmbeddingTable::read(&test_table)?;
            let reports = sweep_k(&train, &test, &ks, &Task::CLASSIFICATION)?;
            let mut outputs = Vec::new();
            for rep in &reports {
                let rel = PathBuf::from(SWEEP_DIR).join(format!("k{:02}.json", rep.k));
                write_json(&dir.join(&rel), rep)?;
                outputs.push(rel);
            }
            if reports.len() >= 2 {
                let png = PathBuf::from(SWEEP_DIR).join("k_sweep.png");
                let csv = emit_k_sweep(&reports, &dir.join(&png))?;
                outputs.push(png);
                outputs.push(csv.strip_prefix(dir).unwrap_or(&csv).to_path_buf());
            }
            Ok(outputs)
        },
    )?;

    let checkpoint = r.path(CHECKPOINT);
    let (params, k, patch) = (cfg.retrieval.distortion, cfg.retrieval.k, cfg.retrieval.inference_patch);
    r.stage(
        "eval_distortion",
        || {
            InputHash::new("eval_distortion")
                .value("settings", &(params, k, patch))?
                .file("checkpoint", &checkpoint)?
                .file("manifest", &split_manifest)
        },
        |dir| {
            let report = eval_distortion(&checkpoint, &split_manifest, &params, k, patch)?;
            write_json(&dir.join(DISTORTION_REPORT), &report)?;
            Ok(vec![DISTORTION_REPORT.into()])
        },
    )?;

    let viz = cfg.viz.clone();
    r.stage(
        "tsne",
        || {
            InputHash::new("tsne")
                .value("projection", &(&viz.projection, viz.tsne_scope))?
                .file("train", &train_table)?
                .file("test", &test_table)
        },
        |dir| {
            let test = EmbeddingTable::read(&test_table)?;
            let table = match viz.tsne_scope {
                TsneScope::Test => test,
                TsneScope::All => concat(&EmbeddingTable::read(&train_table)?, &test)?,
            };
            let coords = project_table(&table, &viz.projection)?;
            let png = PathBuf::from(TSNE_PNG);
            let csv = emit_scatter(&coords, &table, &dir.join(&png))?;
            Ok(vec![png, csv.strip_prefix(dir).unwrap_or(&csv).to_path_buf()])
        },
    )?;

    r.stage(
        "panels",
        || {
            InputHash::new("panels")
                .value("panels", &(viz.panel_k, &viz.panel_queries))?
                .file("manifest", &split_manifest)?
                .file("train", &train_table)?
                .file("test", &test_table)
        },
        |dir| {
            let test = EmbeddingTable::read(&test_table)?;
            let queries = panel_queries(&cfg, &test);
            let index = RetrievalIndex::new(concat(&EmbeddingTable::read(&train_table)?, &test)?, false)?;
            let (manifest, base) = load_manifest(&split_manifest)?;
            let mut outputs = Vec::new();
            for id in &queries {
                let png = PathBuf::from(PANEL_DIR).join(format!("{id}.png"));
                emit_retrieval_panel(&manifest, &base, &index, id, viz.panel_k, &dir.join(&png))?;
                outputs.push(png.with_extension("json"));
                outputs.push(png);
            }
            if outputs.is_empty() {
                return Err(Error::Data("no panel queries".into()));
            }
            Ok(outputs)
        },
    )?;

    let distortion: DistortionReport = read_json(&dir.join(DISTORTION_REPORT))?;
    let mut artifacts = BTreeMap::new();
    for (name, rel) in [
        ("manifest", SPLIT_MANIFEST),
        ("checkpoint", CHECKPOINT),
        ("train_table", TRAIN_TABLE),
        ("test_table", TEST_TABLE),
        ("knn_report", KNN_REPORT),
        ("k_sweep_dir", SWEEP_DIR),
        ("distortion_report", DISTORTION_REPORT),
        ("tsne", TSNE_PNG),
        ("panels_dir", PANEL_DIR),
    ] {
        artifacts.insert(name.to_string(), PathBuf::from(rel));
    }
    let summary = PipelineSummary {
        experiment_dir: dir.clone(),
        config: "config.json".into(),
        completed_stages: r.records.iter().map(|s| s.name.clone()).collect(),
        stages: r.records,
        metrics: knn.metrics(),
        distortion_deltas: distortion.deltas,
        artifacts,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}
