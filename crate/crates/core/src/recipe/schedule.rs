use serde::{Deserialize, Serialize};

use super::RecipeConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    #[default]
    Plateau,
    Cosine,
    Exponential,
}

/// Serializable scheduler state; `lr` is the rate for the coming epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub kind: SchedulerKind,
    pub epoch: usize,
    pub best_error: Option<f64>,
    pub since_best: usize,
    pub lr: f64,
    pub initial_lr: f64,
}

/// `½ (1 + cos(tπ/T)) · η`.
pub fn cosine_lr(initial: f64, t: usize, total: usize) -> Result<f64> {
    if t > total || total == 0 {
        return Err(Error::invalid(format!("cosine schedule step {t} beyond total {total}")));
    }
    Ok(0.5 * (1.0 + (t as f64 * std::f64::consts::PI / total as f64).cos()) * initial)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scheduler {
    pub state: SchedulerState,
    pub total_epochs: usize,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    pub decay: f64,
}

impl Scheduler {
    pub fn new(cfg: &RecipeConfig) -> Self {
        let lr = cfg.initial_lr();
        Scheduler {
            state: SchedulerState {
                kind: cfg.scheduler,
                epoch: 0,
                best_error: None,
                since_best: 0,
                lr,
                initial_lr: lr,
            },
            total_epochs: cfg.total_epochs,
            patience: cfg.plateau_patience,
            factor: cfg.plateau_factor,
            min_lr: cfg.min_lr,
            decay: cfg.exp_decay,
        }
    }

    pub fn lr(&self) -> f64 {
        self.state.lr
    }

    /// Advances one epoch given the validation error (1 − accuracy) and returns the next rate.
    pub fn epoch_end(&mut self, val_error: f64) -> Result<f64> {
        if !val_error.is_finite() {
            return Err(Error::Numeric(format!("validation error is {val_error}")));
        }
        let s = &mut self.state;
        let t = s.epoch + 1;
        let lr = match s.kind {
            SchedulerKind::Plateau => {
                if s.best_error.is_none_or(|b| val_error < b) {
                    s.best_error = Some(val_error);
                    s.since_best = 0;
                    s.lr
                } else {
                    s.since_best += 1;
                    if s.since_best >= self.patience {
                        s.since_best = 0;
                        (s.lr / self.factor).max(self.min_lr)
                    } else {
                        s.lr
                    }
                }
            }
            SchedulerKind::Cosine => cosine_lr(s.initial_lr, t, self.total_epochs)?,
            SchedulerKind::Exponential => s.lr * self.decay,
        };
        s.epoch = t;
        s.lr = lr;
        Ok(lr)
    }
}
