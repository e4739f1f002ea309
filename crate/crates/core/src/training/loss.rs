use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Task;
use crate::nn::Scalar;

/// Per-tumor class index per classification task; `None` marks an absent label.
pub type TaskLabels = BTreeMap<Task, Option<usize>>;

/// Loss terms of one sample (or the mean over a batch).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Voxel-mean binary cross-entropy, unweighted.
    pub segmentation: f64,
    /// Per-task cross-entropy summed over tumors, unweighted.
    pub classification: BTreeMap<Task, f64>,
    /// Absent labels per enabled task; these contribute nothing.
    pub omitted: BTreeMap<Task, usize>,
    /// The weights the total was built with.
    pub lambdas: BTreeMap<Task, f64>,
}

impl LossBreakdown {
    /// `lambda_s * segmentation + sum_p lambda_p * classification[p]`.
    pub fn weighted_sum(&self) -> f64 {
        let seg = self.lambdas.get(&Task::Segmentation).copied().unwrap_or(0.0) * self.segmentation;
        seg + self
            .classification
            .iter()
            .map(|(t, v)| self.lambdas.get(t).copied().unwrap_or(0.0) * v)
            .sum::<f64>()
    }

    /// Mean of several breakdowns (omitted counts are summed).
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let mut out = LossBreakdown::default();
        if items.is_empty() {
            return out;
        }
        let n = items.len() as f64;
        out.lambdas = items[0].lambdas.clone();
        for b in items {
            out.total += b.total / n;
            out.segmentation += b.segmentation / n;
            for (t, v) in &b.classification {
                *out.classification.entry(*t).or_default() += v / n;
            }
            for (t, c) in &b.omitted {
                *out.omitted.entry(*t).or_default() += c;
            }
        }
        out
    }

    /// First non-finite term, by name.
    pub fn non_finite_term(&self) -> Option<String> {
        if !self.segmentation.is_finite() {
            return Some("segmentation".into());
        }
        if let Some((t, _)) = self.classification.iter().find(|(_, v)| !v.is_finite()) {
            return Some(t.name().into());
        }
        (!self.total.is_finite()).then(|| "total".into())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads<T> {
    /// Gradient w.r.t. segmentation logits, when segmentation is enabled.
    pub seg: Option<Vec<T>>,
    /// Gradient w.r.t. each tumor's task logits.
    pub tumors: Vec<BTreeMap<Task, Vec<T>>>,
}

/// Weighted multitask loss of one sample and its logit gradients.
///
/// `lambdas` holds a weight for each enabled task (segmentation included);
/// tasks without a weight are not part of the loss. Segmentation is a
/// voxel-mean binary cross-entropy; each classification task contributes
/// the plain sum over tumors of the cross-entropy of its present labels.
pub fn multitask_loss<T: Scalar>(
    seg_logits: Option<&[T]>,
    seg_target: &[u8],
    tumor_logits: &[BTreeMap<Task, Vec<T>>],
    tumor_labels: &[TaskLabels],
    lambdas: &BTreeMap<Task, f64>,
) -> Result<(LossBreakdown, LossGrads<T>)> {
    multitask_loss_scaled(seg_logits, seg_target, tumor_logits, tumor_labels, lambdas, None)
}

/// [`multitask_loss`] with an extra per-tumor, per-task multiplier on each
/// classification term.
pub fn multitask_loss_scaled<T: Scalar>(
    seg_logits: Option<&[T]>,
    seg_target: &[u8],
    tumor_logits: &[BTreeMap<Task, Vec<T>>],
    tumor_labels: &[TaskLabels],
    lambdas: &BTreeMap<Task, f64>,
    term_scales: Option<&[BTreeMap<Task, f64>]>,
) -> Result<(LossBreakdown, LossGrads<T>)> {
    if tumor_logits.len() != tumor_labels.len() {
        return Err(Error::Shape(format!(
            "{} tumor predictions vs {} label sets",
            tumor_logits.len(),
            tumor_labels.len()
        )));
    }
    if term_scales.is_some_and(|s| s.len() != tumor_labels.len()) {
        return Err(Error::Shape("term scales must align with tumors".into()));
    }
    let mut breakdown = LossBreakdown {
        lambdas: lambdas.clone(),
        ..LossBreakdown::default()
    };

    let seg_grad = match lambdas.get(&Task::Segmentation) {
        Some(&lambda_s) => {
            let logits = seg_logits
                .ok_or_else(|| Error::Shape("segmentation enabled but no logits given".into()))?;
            if logits.len() != seg_target.len() || logits.is_empty() {
                return Err(Error::Shape(format!(
                    "{} segmentation logits vs {} target voxels",
                    logits.len(),
                    seg_target.len()
                )));
            }
            let n = logits.len() as f64;
            let mut sum = 0.0;
            let mut grad = Vec::with_capacity(logits.len());
            for (&z, &y) in logits.iter().zip(seg_target) {
                if y > 1 {
                    return Err(Error::Data("segmentation target is not binary".into()));
                }
                let (l, g) = bce_with_logits(z.to_f64().unwrap(), f64::from(y));
                sum += l;
                grad.push(T::from_f64_lossy(lambda_s * g / n));
            }
            breakdown.segmentation = sum / n;
            Some(grad)
        }
        None => None,
    };

    let mut tumor_grads = Vec::with_capacity(tumor_logits.len());
    for (i, (logits, labels)) in tumor_logits.iter().zip(tumor_labels).enumerate() {
        let mut grads = BTreeMap::new();
        for (&task, &lambda) in lambdas.iter().filter(|(t, _)| t.is_classification()) {
            let entry = breakdown.classification.entry(task).or_insert(0.0);
            let Some(label) = labels.get(&task).copied().flatten() else {
                *breakdown.omitted.entry(task).or_insert(0) += 1;
                continue;
            };
            let z = logits.get(&task).ok_or_else(|| {
                Error::Shape(format!("tumor {i}: missing logits for task {task}"))
            })?;
            if label >= z.len() {
                return Err(Error::Data(format!(
                    "tumor {i}: label {label} for task {task} but only {} classes",
                    z.len()
                )));
            }
            let scale = term_scales.map_or(1.0, |s| s[i].get(&task).copied().unwrap_or(1.0));
            let (l, g) = softmax_cross_entropy(z, label);
            *entry += scale * l;
            grads.insert(
                task,
                g.into_iter()
                    .map(|v| T::from_f64_lossy(lambda * scale * v))
                    .collect(),
            );
        }
        tumor_grads.push(grads);
    }
    for task in lambdas.keys().filter(|t| t.is_classification()) {
        breakdown.classification.entry(*task).or_insert(0.0);
        breakdown.omitted.entry(*task).or_insert(0);
    }
    breakdown.total = breakdown.weighted_sum();
    Ok((
        breakdown,
        LossGrads {
            seg: seg_grad,
            tumors: tumor_grads,
        },
    ))
}

/// Stable binary cross-entropy on a logit; returns (loss, d loss / d z).
pub(crate) fn bce_with_logits(z: f64, y: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    let sig = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    (loss, sig - y)
}

/// Multiclass cross-entropy; returns (loss, d loss / d logits).
pub(crate) fn softmax_cross_entropy<T: Scalar>(z: &[T], label: usize) -> (f64, Vec<f64>) {
    let z: Vec<f64> = z.iter().map(|v| v.to_f64().unwrap()).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = m + sum.ln() - z[label];
    let grad = exps
        .iter()
        .enumerate()
        .map(|(k, e)| e / sum - if k == label { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}
