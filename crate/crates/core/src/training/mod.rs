//! Patch sampling, the weighted multitask loss, the learning-rate schedule,
//! SGD with Nesterov momentum and the training/ablation drivers.

mod ablation;
mod loss;
mod optimizer;
mod sampler;
mod trainer;

pub use ablation::{ablation_suite, subset_name, AblationReport, AblationRow};
pub use loss::{multitask_loss, multitask_loss_scaled, LossBreakdown, LossGrads, TaskLabels};
pub use optimizer::Sgd;
pub use sampler::{sample_patch, PatchSample, RebasedTumor};
pub use trainer::{
    accumulate_gradients, load_training_data, loss_weights, train, train_network, EpochRecord,
    LoadedImage, TrainReport,
};
pub(crate) use trainer::task_labels;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub patch_size: [usize; 3],
    pub lr_initial: f64,
    /// Epochs (0-based, inclusive) at which the rate is divided by `lr_drop_factor`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub lambda_s: f64,
    /// Weight shared by every classification task.
    pub lambda_p: f64,
    /// Overrides the model config's task list when set.
    pub enabled_tasks: Option<Vec<Task>>,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk scale: 10 epochs with drops at 7 and 9.
    fn default() -> Self {
        Self {
            epochs: 10,
            batches_per_epoch: 50,
            batch_size: 2,
            patch_size: [32, 32, 32],
            lr_initial: 0.1,
            lr_drop_epochs: vec![7, 9],
            lr_drop_factor: 10.0,
            momentum: 0.9,
            nesterov: true,
            lambda_s: 1.0,
            lambda_p: 1e-3,
            enabled_tasks: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The full-scale schedule: 120 epochs of 200 batches of 2 patches of
    /// 120^3 voxels, rate 0.1 dropped tenfold at epochs 90 and 105.
    pub fn paper_scale() -> Self {
        Self {
            epochs: 120,
            batches_per_epoch: 200,
            patch_size: [120, 120, 120],
            lr_drop_epochs: vec![90, 105],
            ..Self::default()
        }
    }

    pub fn validate(&self, down_up_factor: usize) -> Result<()> {
        if self.epochs == 0 || self.batches_per_epoch == 0 {
            return Err(Error::config("epochs", "epochs and batches_per_epoch must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self
            .patch_size
            .iter()
            .any(|&p| p == 0 || p % down_up_factor != 0)
        {
            return Err(Error::config(
                "patch_size",
                format!("every side must be a positive multiple of {down_up_factor}"),
            ));
        }
        if !self.lr_drop_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("lr_drop_epochs", "must be strictly increasing"));
        }
        if self.lr_drop_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return Err(Error::config("lr_drop_epochs", "every drop must precede the last epoch"));
        }
        if !(self.lr_initial > 0.0) || !(self.lr_drop_factor >= 1.0) {
            return Err(Error::config("lr_initial", "rate must be positive and drop factor >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.lambda_s >= 0.0) || !(self.lambda_p >= 0.0) {
            return Err(Error::config("lambda_s", "loss weights must be non-negative"));
        }
        if self.enabled_tasks.as_ref().is_some_and(|t| t.is_empty()) {
            return Err(Error::config("enabled_tasks", "must not be empty"));
        }
        Ok(())
    }
}

/// Piecewise-constant step schedule.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::config(
            "epoch",
            format!("epoch {epoch} outside [0, {})", config.epochs),
        ));
    }
    let drops = config.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
    Ok(config.lr_initial / config.lr_drop_factor.powi(drops as i32))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let full = TrainConfig::paper_scale();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b;
        assert!(close(lr_at(0, &full).unwrap(), 0.1));
        assert!(close(lr_at(89, &full).unwrap(), 0.1));
        assert!(close(lr_at(90, &full).unwrap(), 0.01));
        assert!(close(lr_at(105, &full).unwrap(), 0.001));
        assert!(close(lr_at(119, &full).unwrap(), 0.001));
        assert!(lr_at(120, &full).is_err());
        let mut prev = f64::INFINITY;
        for e in 0..full.epochs {
            let lr = lr_at(e, &full).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate(4).is_ok());
        assert!(TrainConfig::paper_scale().validate(4).is_ok());
        let bad = TrainConfig {
            patch_size: [30, 32, 32],
            ..TrainConfig::default()
        };
        assert!(bad.validate(4).is_err());
        let bad = TrainConfig {
            lr_drop_epochs: vec![9, 7],
            ..TrainConfig::default()
        };
        assert!(bad.validate(4).is_err());
        let bad = TrainConfig {
            lr_drop_epochs: vec![7, 10],
            ..TrainConfig::default()
        };
        assert!(bad.validate(4).is_err());
    }
}
