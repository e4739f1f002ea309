use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::table::EmbeddingTable;
use crate::error::{Error, Result};
use crate::model::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub row: usize,
    pub tumor_id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub neighbors: Vec<Neighbor>,
    /// Fewer than `k` candidates were available.
    pub truncated: bool,
}

/// Read-only exact Euclidean index over a table.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    table: EmbeddingTable,
    vectors: Vec<f64>,
    normalize: bool,
}

fn l2_normalized(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl RetrievalIndex {
    /// `normalize` L2-normalizes stored and query vectors.
    pub fn new(table: EmbeddingTable, normalize: bool) -> Result<Self> {
        table.validate()?;
        let c = table.channels;
        let mut vectors: Vec<f64> = table.vectors.iter().map(|&v| f64::from(v)).collect();
        if normalize && c > 0 {
            vectors.chunks_mut(c).for_each(l2_normalized);
        }
        Ok(Self {
            table,
            vectors,
            normalize,
        })
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    fn prepare(&self, query: &[f32]) -> Result<Vec<f64>> {
        if query.len() != self.table.channels {
            return Err(Error::Shape(format!(
                "query of length {} against an index of width {}",
                query.len(),
                self.table.channels
            )));
        }
        let mut q: Vec<f64> = query.iter().map(|&v| f64::from(v)).collect();
        if self.normalize {
            l2_normalized(&mut q);
        }
        Ok(q)
    }

    /// Every candidate, nearest first; ties by ascending tumor_id.
    pub fn ranked(&self, query: &[f32], exclude_image_id: Option<&str>) -> Result<Vec<Neighbor>> {
        let q = self.prepare(query)?;
        let c = self.table.channels;
        let mut out: Vec<Neighbor> = self
            .table
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| exclude_image_id != Some(r.image_id.as_str()))
            .map(|(i, r)| Neighbor {
                row: i,
                tumor_id: r.tumor_id.clone(),
                distance: euclidean(&q, &self.vectors[i * c..(i + 1) * c]),
            })
            .collect();
        out.sort_by(|a, b| {
            a.distance
                .partial_cmp(&b.distance)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.tumor_id.cmp(&b.tumor_id))
        });
        Ok(out)
    }

    pub fn query(&self, query: &[f32], k: usize, exclude_image_id: Option<&str>) -> Result<QueryResult> {
        if k == 0 {
            return Err(Error::Retrieval("k must be at least 1".into()));
        }
        let mut neighbors = self.ranked(query, exclude_image_id)?;
        if neighbors.is_empty() {
            return Err(Error::Retrieval("no candidates left after exclusion".into()));
        }
        let truncated = neighbors.len() < k;
        neighbors.truncate(k);
        Ok(QueryResult {
            neighbors,
            truncated,
        })
    }

    /// Majority vote over the `k` nearest rows carrying a label for `task`;
    /// ties go to the smaller summed distance, then the lower label.
    pub fn knn_classify(
        &self,
        query: &[f32],
        k: usize,
        task: Task,
        exclude_image_id: Option<&str>,
    ) -> Result<usize> {
        if k == 0 {
            return Err(Error::Retrieval("k must be at least 1".into()));
        }
        let ranked = self.ranked(query, exclude_image_id)?;
        let labeled: Vec<(usize, f64)> = ranked
            .iter()
            .filter_map(|n| self.table.rows[n.row].label(task).map(|l| (l, n.distance)))
            .take(k)
            .collect();
        vote(&labeled).ok_or_else(|| Error::Retrieval(format!("no rows labeled for task {task}")))
    }

    /// Mean linear size of the `k` nearest rows.
    pub fn knn_regress(&self, query: &[f32], k: usize, exclude_image_id: Option<&str>) -> Result<f64> {
        let r = self.query(query, k, exclude_image_id)?;
        let sum: f64 = r
            .neighbors
            .iter()
            .map(|n| self.table.rows[n.row].linear_size_mm)
            .sum();
        Ok(sum / r.neighbors.len() as f64)
    }
}

/// (label, distance) pairs, nearest first.
pub(crate) fn vote(labeled: &[(usize, f64)]) -> Option<usize> {
    let mut tally: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for &(label, d) in labeled {
        let e = tally.entry(label).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += d;
    }
    // BTreeMap iterates labels in ascending order, so strict comparisons keep
    // the lower label on a full tie.
    let mut best: Option<(usize, usize, f64)> = None;
    for (label, (count, dist)) in tally {
        let better = match best {
            None => true,
            Some((_, bc, bd)) => count > bc || (count == bc && dist < bd),
        };
        if better {
            best = Some((label, count, dist));
        }
    }
    best.map(|b| b.0)
}
