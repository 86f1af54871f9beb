//! Run configuration, the training and evaluation loops, checkpoints with
//! resumable state, metrics files and the ablation suites.

mod ablation;
mod eval;
mod train;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use ablation::{presets, run_ablation, AblationOptions, AblationReport, AblationRow, ExperimentPreset, Suite};
pub use eval::{evaluate, run_eval, ClassAccuracy, EvalReport, Prediction};
pub use train::{run_train, TrainOptions, TrainState, TrainSummary, BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::model::{FrontendConfig, ModelConfig};
use crate::recipe::{RecipeConfig, SchedulerKind};
use crate::recurrent::{GruInit, GruStackConfig};

/// One experiment: the `model`, `recipe` and `data` sections of a config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub recipe: RecipeConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Parses a config document. Errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.recipe.validate()?;
        self.data.validate()?;
        self.model.frontend.spatial_plan(self.data.crop, self.data.crop).map_err(|e| {
            Error::config("data.crop", e.to_string())
        })?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding; identical configs hash identically.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// The basic pipeline at desk scale. The recurrent weights use the scaled
    /// init and the batch is small with a matching base rate: with the
    /// uniform(−1, 1) init and batch 32 at 3e-4, desk-sized models sit at
    /// chance for most of the run.
    pub fn desk_basic() -> Self {
        RunConfig {
            model: ModelConfig {
                frontend: FrontendConfig::desk(),
                backend: GruStackConfig { init: GruInit::Scaled, ..Default::default() },
                num_classes: 10,
                use_word_boundary: false,
            },
            recipe: RecipeConfig { total_epochs: 60, batch: 8, base_batch: 8, base_lr: 2e-3, ..Default::default() },
            data: DataConfig::default(),
        }
    }

    /// The refined pipeline: SE, mixup, cosine schedule, label smoothing and word boundaries.
    pub fn desk_refined() -> Self {
        let mut cfg = Self::desk_basic();
        cfg.apply_refinements();
        cfg
    }

    pub fn apply_refinements(&mut self) {
        self.model.frontend.se_enabled = true;
        self.model.use_word_boundary = true;
        self.recipe.mixup = true;
        self.recipe.label_smoothing = true;
        self.recipe.scheduler = SchedulerKind::Cosine;
    }
}

/// Process exit status for an error: 2 configuration, 3 data or I/O, 4 numeric failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => 2,
        Error::Numeric(_) | Error::NonFinite(_) => 4,
        _ => 3,
    }
}

/// Which pass a metrics row describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Val,
}

/// One line of `metrics.csv`: `epoch,phase,lr,loss,acc`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: Phase,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
    pub loss: f64,
    pub acc: f64,
}

pub const METRICS_HEADER: &str = "epoch,phase,lr,loss,acc";

impl MetricsRow {
    /// Floats use the shortest representation that round-trips exactly.
    pub fn to_csv(&self) -> String {
        let phase = match self.phase {
            Phase::Train => "train",
            Phase::Val => "val",
        };
        format!("{},{phase},{:?},{:?},{:?}", self.epoch, self.lr, self.loss, self.acc)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad metrics row `{line}`"));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        let phase = match f[1] {
            "train" => Phase::Train,
            "val" => Phase::Val,
            _ => return Err(bad()),
        };
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(MetricsRow {
            epoch: f[0].parse().map_err(|_| bad())?,
            phase,
            lr: num(f[2])?,
            loss: num(f[3])?,
            acc: num(f[4])?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format(format!("{} lacks the metrics header", path.display())));
    }
    lines.filter(|l| !l.is_empty()).map(MetricsRow::parse).collect()
}
