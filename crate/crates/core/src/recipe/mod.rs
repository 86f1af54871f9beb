//! Training recipe: losses, mixup, the optimizer and learning-rate schedules.

mod adam;
mod loss;
mod mixup;
mod schedule;

use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use loss::{cross_entropy, label_smooth, smoothed_targets};
pub use mixup::{mixup_batch, mixup_with, MixBatch, MixPlan};
pub use schedule::{cosine_lr, Scheduler, SchedulerKind, SchedulerState};

use crate::error::{Error, Result};

/// Every optimization hyperparameter. The defaults are the full-scale recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecipeConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub base_batch: usize,
    pub batch: usize,
    /// Label-smoothing strength, used when `label_smoothing` is set.
    pub epsilon: f64,
    /// Beta(α, α) parameter for mixup, used when `mixup` is set.
    pub alpha: f64,
    pub total_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    pub exp_decay: f64,
    pub scheduler: SchedulerKind,
    pub mixup: bool,
    /// Draw λ per sample instead of once per batch.
    pub mixup_per_sample: bool,
    pub label_smoothing: bool,
    pub decoupled_weight_decay: bool,
    pub exclude_norm_and_bias_from_decay: bool,
    /// Root seed for initialization, shuffling, augmentation and dropout.
    pub seed: u64,
}

impl Default for RecipeConfig {
    fn default() -> Self {
        RecipeConfig {
            base_lr: 3e-4,
            weight_decay: 1e-4,
            base_batch: 32,
            batch: 32,
            epsilon: 0.1,
            alpha: 0.2,
            total_epochs: 80,
            plateau_patience: 3,
            plateau_factor: 2.0,
            min_lr: 1e-6,
            exp_decay: 0.95,
            scheduler: SchedulerKind::Plateau,
            mixup: false,
            mixup_per_sample: false,
            label_smoothing: false,
            decoupled_weight_decay: false,
            exclude_norm_and_bias_from_decay: false,
            seed: 0,
        }
    }
}

impl RecipeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("recipe.base_lr", self.base_lr),
            ("recipe.plateau_factor", self.plateau_factor),
            ("recipe.min_lr", self.min_lr),
            ("recipe.exp_decay", self.exp_decay),
            ("recipe.alpha", self.alpha),
        ];
        for (path, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(path, format!("must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("recipe.weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::config("recipe.epsilon", "must lie in [0, 1)"));
        }
        if self.mixup && self.alpha > 1.0 {
            return Err(Error::config("recipe.alpha", "the Beta sampler supports alpha <= 1"));
        }
        for (path, v) in [
            ("recipe.batch", self.batch),
            ("recipe.base_batch", self.base_batch),
            ("recipe.total_epochs", self.total_epochs),
            ("recipe.plateau_patience", self.plateau_patience),
        ] {
            if v == 0 {
                return Err(Error::config(path, "must be at least 1"));
            }
        }
        Ok(())
    }

    /// Learning rate after linear batch scaling.
    pub fn initial_lr(&self) -> f64 {
        scale_lr(self.base_lr, self.batch, self.base_batch)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            decoupled: self.decoupled_weight_decay,
            exclude_norm_and_bias: self.exclude_norm_and_bias_from_decay,
            ..AdamConfig::default()
        }
    }
}

/// Linear scaling rule: `base_lr · batch / base_batch`.
pub fn scale_lr(base_lr: f64, batch: usize, base_batch: usize) -> f64 {
    base_lr * batch as f64 / base_batch as f64
}
