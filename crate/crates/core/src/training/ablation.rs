use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::trainer::train;
use super::{TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Task};

/// One training run of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub tasks: Vec<Task>,
    pub checkpoint: PathBuf,
    pub final_loss: f64,
    /// Downstream retrieval metrics, filled in after evaluation.
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Plain-text comparison table, one line per run.
    pub fn table(&self) -> String {
        let columns: BTreeSet<&String> = self.rows.iter().flat_map(|r| r.metrics.keys()).collect();
        let mut out = format!("{:<48} {:>10}", "tasks", "loss");
        for c in &columns {
            out.push_str(&format!(" {c:>14}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:<48} {:>10.5}", r.name, r.final_loss));
            for c in &columns {
                match r.metrics.get(*c) {
                    Some(v) => out.push_str(&format!(" {v:>14.4}")),
                    None => out.push_str(&format!(" {:>14}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Canonical name of a task subset, e.g. `segmentation+type`.
pub fn subset_name(tasks: &[Task]) -> String {
    let set: BTreeSet<Task> = tasks.iter().copied().collect();
    set.iter().map(|t| t.name()).collect::<Vec<_>>().join("+")
}

/// Train one network per task subset with a shared seed; each run writes to
/// `out_dir/<subset name>/`.
pub fn ablation_suite(
    manifest_path: &Path,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    subsets: &[Vec<Task>],
    out_dir: &Path,
) -> Result<(AblationReport, Vec<TrainReport>)> {
    if subsets.is_empty() {
        return Err(Error::config("subsets", "at least one task subset is required"));
    }
    let mut seen = BTreeSet::new();
    for s in subsets {
        if s.is_empty() {
            return Err(Error::config("subsets", "task subsets must be nonempty"));
        }
        if !seen.insert(subset_name(s)) {
            return Err(Error::config(
                "subsets",
                format!("duplicate ablation entry `{}`", subset_name(s)),
            ));
        }
    }
    let mut rows = Vec::with_capacity(subsets.len());
    let mut reports = Vec::with_capacity(subsets.len());
    for s in subsets {
        let name = subset_name(s);
        let config = TrainConfig {
            enabled_tasks: Some(s.clone()),
            ..train_config.clone()
        };
        log::info!("ablation run `{name}`");
        let report = train(manifest_path, model_config, &config, &out_dir.join(&name))?;
        rows.push(AblationRow {
            name,
            tasks: report.enabled_tasks.clone(),
            checkpoint: report.final_checkpoint.clone(),
            final_loss: report.epochs.last().map_or(f64::NAN, |e| e.loss.total),
            metrics: BTreeMap::new(),
        });
        reports.push(report);
    }
    let report = AblationReport { rows };
    let path = out_dir.join("ablation.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::json("ablation report", e))?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok((report, reports))
}
