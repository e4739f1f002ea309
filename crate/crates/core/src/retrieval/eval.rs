use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::index::RetrievalIndex;
use super::table::EmbeddingTable;
use crate::error::{Error, Result};
use crate::model::Task;

/// Per-query record shipped with each report so that every metric can be
/// recomputed offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPrediction {
    pub tumor_id: String,
    pub image_id: String,
    pub truth: BTreeMap<Task, Option<usize>>,
    pub predicted: BTreeMap<Task, usize>,
    pub true_size_mm: f64,
    pub predicted_size_mm: f64,
    pub neighbors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnEvalReport {
    pub k: usize,
    pub accuracy: BTreeMap<Task, f64>,
    /// Test tumors carrying each task's label.
    pub evaluable: BTreeMap<Task, usize>,
    pub size_rmse_mm: f64,
    /// RMSE of always predicting the candidate-set mean size.
    pub size_rmse_mean_baseline_mm: f64,
    pub n_queries: usize,
    pub warnings: Vec<String>,
    pub predictions: Vec<QueryPrediction>,
}

impl KnnEvalReport {
    /// Recompute accuracies and RMSE from the prediction log.
    pub fn recompute(&self) -> (BTreeMap<Task, f64>, f64) {
        let mut acc = BTreeMap::new();
        for &task in self.accuracy.keys() {
            let (mut hit, mut n) = (0usize, 0usize);
            for p in &self.predictions {
                if let Some(Some(t)) = p.truth.get(&task) {
                    n += 1;
                    hit += usize::from(p.predicted.get(&task) == Some(t));
                }
            }
            acc.insert(task, if n == 0 { f64::NAN } else { hit as f64 / n as f64 });
        }
        let se: f64 = self
            .predictions
            .iter()
            .map(|p| (p.predicted_size_mm - p.true_size_mm).powi(2))
            .sum();
        (acc, (se / self.predictions.len() as f64).sqrt())
    }

    /// Flat `name -> value` view used by comparison tables.
    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let mut m: BTreeMap<String, f64> = self
            .accuracy
            .iter()
            .map(|(t, v)| (format!("{}_acc", t.name()), *v))
            .collect();
        m.insert("size_rmse_mm".into(), self.size_rmse_mm);
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Drop candidates from the query's own image.
    pub exclude_same_image: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            exclude_same_image: true,
        }
    }
}

/// Test tumors query the train table; same-image candidates are excluded.
pub fn eval_knn(
    train: &EmbeddingTable,
    test: &EmbeddingTable,
    k: usize,
    tasks: &[Task],
) -> Result<KnnEvalReport> {
    let index = RetrievalIndex::new(train.clone(), false)?;
    eval_knn_with(&index, test, k, tasks, EvalOptions::default())
}

pub fn eval_knn_with(
    index: &RetrievalIndex,
    test: &EmbeddingTable,
    k: usize,
    tasks: &[Task],
    options: EvalOptions,
) -> Result<KnnEvalReport> {
    let train = index.table();
    if train.fingerprint != test.fingerprint {
        return Err(Error::Retrieval(format!(
            "fingerprint mismatch: train {} vs test {}",
            train.fingerprint, test.fingerprint
        )));
    }
    if train.channels != test.channels {
        return Err(Error::Retrieval("tables have different widths".into()));
    }
    if k == 0 {
        return Err(Error::Retrieval("k must be at least 1".into()));
    }
    if test.is_empty() || train.is_empty() {
        return Err(Error::Retrieval("empty table".into()));
    }
    let tasks: Vec<Task> = tasks
        .iter()
        .copied()
        .filter(|t| t.is_classification())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mean_size =
        train.rows.iter().map(|r| r.linear_size_mm).sum::<f64>() / train.len() as f64;

    let mut predictions = Vec::with_capacity(test.len());
    let mut degenerate = 0usize;
    let mut truncated = 0usize;
    for (i, row) in test.rows.iter().enumerate() {
        let q = test.vector(i);
        let exclude = options.exclude_same_image.then_some(row.image_id.as_str());
        let ranked = index.ranked(q, exclude)?;
        if ranked.is_empty() {
            return Err(Error::Retrieval(format!("{}: no candidates", row.tumor_id)));
        }
        if ranked.len() > 1 && ranked.last().unwrap().distance - ranked[0].distance <= 1e-12 {
            degenerate += 1;
        }
        if ranked.len() < k {
            truncated += 1;
        }
        let mut predicted = BTreeMap::new();
        for &task in &tasks {
            let labeled: Vec<(usize, f64)> = ranked
                .iter()
                .filter_map(|n| train.rows[n.row].label(task).map(|l| (l, n.distance)))
                .take(k)
                .collect();
            if let Some(l) = super::index::vote(&labeled) {
                predicted.insert(task, l);
            }
        }
        let top: Vec<_> = ranked.iter().take(k).collect();
        let predicted_size =
            top.iter().map(|n| train.rows[n.row].linear_size_mm).sum::<f64>() / top.len() as f64;
        predictions.push(QueryPrediction {
            tumor_id: row.tumor_id.clone(),
            image_id: row.image_id.clone(),
            truth: tasks.iter().map(|&t| (t, row.label(t))).collect(),
            predicted,
            true_size_mm: row.linear_size_mm,
            predicted_size_mm: predicted_size,
            neighbors: top.iter().map(|n| n.tumor_id.clone()).collect(),
        });
    }

    let mut warnings = Vec::new();
    if degenerate > 0 {
        warnings.push(format!(
            "degenerate distances: {degenerate} queries found all candidates equidistant"
        ));
    }
    if truncated > 0 {
        warnings.push(format!("{truncated} queries had fewer than {k} candidates"));
    }
    let mut evaluable = BTreeMap::new();
    for &task in &tasks {
        evaluable.insert(
            task,
            predictions.iter().filter(|p| p.truth[&task].is_some()).count(),
        );
    }
    let baseline = (test
        .rows
        .iter()
        .map(|r| (r.linear_size_mm - mean_size).powi(2))
        .sum::<f64>()
        / test.len() as f64)
        .sqrt();
    let mut report = KnnEvalReport {
        k,
        accuracy: tasks.iter().map(|&t| (t, 0.0)).collect(),
        evaluable,
        size_rmse_mm: 0.0,
        size_rmse_mean_baseline_mm: baseline,
        n_queries: predictions.len(),
        warnings,
        predictions,
    };
    let (acc, rmse) = report.recompute();
    report.accuracy = acc;
    report.size_rmse_mm = rmse;
    for w in &report.warnings {
        log::warn!("k={k}: {w}");
    }
    Ok(report)
}

/// One report per K.
pub fn sweep_k(
    train: &EmbeddingTable,
    test: &EmbeddingTable,
    ks: &[usize],
    tasks: &[Task],
) -> Result<Vec<KnnEvalReport>> {
    if ks.is_empty() {
        return Err(Error::Retrieval("no K values given".into()));
    }
    let mut seen = BTreeSet::new();
    for &k in ks {
        if k == 0 {
            return Err(Error::Retrieval("K values must be at least 1".into()));
        }
        if !seen.insert(k) {
            return Err(Error::Retrieval(format!("duplicate K {k}")));
        }
    }
    let index = RetrievalIndex::new(train.clone(), false)?;
    ks.iter()
        .map(|&k| eval_knn_with(&index, test, k, tasks, EvalOptions::default()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::retrieval::TableRow;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_table(n: usize, c: usize, seed: u64, constant: bool) -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = EmbeddingTable::new("fp".into(), c);
        for i in 0..n {
            let row = TableRow {
                tumor_id: format!("img{i:04}_t0"),
                image_id: format!("img{i:04}"),
                bbox: BBox::new([0; 3], [1; 3]).unwrap(),
                labels: [
                    (Task::Type, Some(i % 3)),
                    (Task::LeftRight, (i % 7 != 0).then_some(i % 2)),
                ]
                .into_iter()
                .collect(),
                linear_size_mm: rng.gen_range(4.0..20.0),
            };
            let v: Vec<f32> = (0..c)
                .map(|_| if constant { 1.0 } else { rng.gen_range(-1.0..1.0) })
                .collect();
            t.push(row, &v).unwrap();
        }
        t
    }

    #[test]
    fn identity_retrieval_is_perfect_without_exclusion() {
        let t = random_table(50, 8, 1, false);
        let idx = RetrievalIndex::new(t.clone(), false).unwrap();
        let opts = EvalOptions {
            exclude_same_image: false,
        };
        let r = eval_knn_with(&idx, &t, 1, &[Task::Type, Task::LeftRight], opts).unwrap();
        assert_eq!(r.accuracy[&Task::Type], 1.0);
        assert_eq!(r.accuracy[&Task::LeftRight], 1.0);
        assert_eq!(r.size_rmse_mm, 0.0);
        assert_eq!(r.evaluable[&Task::LeftRight], 50 - 8);
    }

    #[test]
    fn random_embeddings_give_chance_accuracy() {
        let mut accs = Vec::new();
        for seed in 0..20 {
            let train = random_table(600, 16, seed, false);
            let mut test = random_table(600, 16, seed + 1000, false);
            test.fingerprint = train.fingerprint.clone();
            for r in test.rows.iter_mut() {
                r.image_id.push('q');
            }
            accs.push(eval_knn(&train, &test, 5, &[Task::Type]).unwrap().accuracy[&Task::Type]);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 1.0 / 3.0).abs() <= 0.06, "{mean}");
    }

    #[test]
    fn constant_embeddings_warn() {
        let t = random_table(20, 4, 2, true);
        let r = eval_knn(&t, &t, 5, &[Task::Type]).unwrap();
        assert!(r.warnings.iter().any(|w| w.contains("degenerate")));
    }

    #[test]
    fn mismatched_fingerprints_and_duplicate_k() {
        let a = random_table(10, 4, 3, false);
        let mut b = a.clone();
        b.fingerprint = "other".into();
        assert!(eval_knn(&a, &b, 5, &[Task::Type]).is_err());
        let err = sweep_k(&a, &a, &[1, 2, 1], &[Task::Type]).unwrap_err();
        assert!(err.to_string().contains("duplicate K"));
        let reports = sweep_k(&a, &a, &[5], &[Task::Type]).unwrap();
        assert_eq!(reports[0], eval_knn(&a, &a, 5, &[Task::Type]).unwrap());
    }

    #[test]
    fn log_reproduces_metrics() {
        let train = random_table(40, 4, 4, false);
        let r = eval_knn(&train, &train, 3, &[Task::Type, Task::LeftRight]).unwrap();
        let (acc, rmse) = r.recompute();
        assert_eq!(acc, r.accuracy);
        assert_eq!(rmse, r.size_rmse_mm);
        for p in &r.predictions {
            assert!(p.neighbors.iter().all(|n| !n.starts_with(&p.image_id)));
        }
    }
}
