use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use super::{MetricsRow, Phase, RunConfig, METRICS_HEADER};
use crate::data::{epoch_shuffle, make_batch, Dataset, Split, STREAM_AUGMENT, STREAM_SHUFFLE};
use crate::error::{Error, Result};
use crate::model::{read_checkpoint, write_checkpoint, Checkpoint, LipModel};
use crate::nn::{Graph, Mode, ParamStore};
use crate::recipe::{mixup_batch, smoothed_targets, Adam, MixBatch, Scheduler, SchedulerState};
use crate::tensor::Rng;

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.lkpt";
pub const LAST_CHECKPOINT: &str = "last.lkpt";
pub const CONFIG_FILE: &str = "config.json";

const STREAM_INIT: u64 = 21;
const STREAM_MIX: u64 = 22;
const STREAM_DROPOUT: u64 = 23;
pub(crate) const STREAM_EVAL: u64 = 24;

/// Roots of the independent random streams of a run, derived from `recipe.seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub model: u64,
    pub data: u64,
    pub augment: u64,
}

impl RunSeeds {
    pub fn from_root(seed: u64) -> Self {
        RunSeeds {
            model: Rng::derive(seed, &[STREAM_INIT]).seed(),
            data: Rng::derive(seed, &[STREAM_SHUFFLE]).seed(),
            augment: Rng::derive(seed, &[STREAM_AUGMENT]).seed(),
        }
    }
}

/// Everything besides the weights needed to continue a run exactly. Adam
/// moments travel as checkpoint tensors named `optim.m.*` and `optim.v.*`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub adam_step: u64,
    pub scheduler: SchedulerState,
    pub best_val_acc: Option<f64>,
    pub best_epoch: usize,
    pub seeds: RunSeeds,
}

#[derive(Serialize, Deserialize)]
struct CheckpointState {
    config: RunConfig,
    train: TrainState,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint (normally `last.lkpt` of an earlier run).
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs in this invocation; the run stays resumable.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    /// Completed epochs, counting any resumed ones.
    pub epochs: usize,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub last_train_acc: f64,
    pub last_val_acc: f64,
    pub config_hash: String,
}

fn optim_names(store: &ParamStore<f32>) -> impl Iterator<Item = (String, String)> + '_ {
    store.params().iter().map(|p| (format!("optim.m.{}", p.name), format!("optim.v.{}", p.name)))
}

fn save(path: &Path, cfg: &RunConfig, store: &ParamStore<f32>, adam: &Adam<f32>, state: &TrainState) -> Result<()> {
    let json = serde_json::to_value(CheckpointState { config: cfg.clone(), train: state.clone() })?;
    let mut ckpt = Checkpoint::from_store(&cfg.model, store, json);
    for (i, (m, v)) in optim_names(store).enumerate() {
        ckpt.tensors.push((m, adam.m[i].clone()));
        ckpt.tensors.push((v, adam.v[i].clone()));
    }
    write_checkpoint(path, &ckpt)
}

/// Reads a training checkpoint back into a model, its parameters and the run state.
pub(crate) fn load_run_checkpoint(path: &Path) -> Result<(RunConfig, LipModel, ParamStore<f32>, Checkpoint<f32>)> {
    let ckpt: Checkpoint<f32> = read_checkpoint(path)?;
    let state: CheckpointState = serde_json::from_value(ckpt.state.clone())
        .map_err(|e| Error::Format(format!("{}: not a training checkpoint: {e}", path.display())))?;
    if state.config.model != ckpt.model {
        return Err(Error::Format(format!("{}: model section disagrees with its run config", path.display())));
    }
    let (model, mut store) = LipModel::init::<f32>(&ckpt.model, 0)?;
    ckpt.restore_into(&mut store)?;
    Ok((state.config, model, store, ckpt))
}

fn append_rows(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut f = OpenOptions::new().append(true).open(path)?;
    for r in rows {
        writeln!(f, "{}", r.to_csv())?;
    }
    f.flush()?;
    Ok(())
}

/// Rewrites the metrics file keeping only rows of epochs `<= keep`.
fn reset_metrics(path: &Path, keep: usize) -> Result<()> {
    let kept = if keep > 0 && path.exists() {
        super::read_metrics(path)?.into_iter().filter(|r| r.epoch <= keep).collect()
    } else {
        Vec::new()
    };
    let mut text = format!("{METRICS_HEADER}\n");
    for r in &kept {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

struct EpochStats {
    loss: f64,
    acc: f64,
}

#[allow(clippy::too_many_arguments)]
fn train_epoch(
    cfg: &RunConfig,
    model: &LipModel,
    store: &mut ParamStore<f32>,
    adam: &mut Adam<f32>,
    ds: &Dataset,
    train_idx: &[usize],
    seeds: &RunSeeds,
    epoch: usize,
    lr: f64,
) -> Result<EpochStats> {
    let r = &cfg.recipe;
    let k = cfg.model.num_classes;
    let eps = if r.label_smoothing { r.epsilon } else { 0.0 };
    let order: Vec<usize> = epoch_shuffle(train_idx.len(), &mut Rng::derive(seeds.data, &[epoch as u64]))
        .into_iter()
        .map(|i| train_idx[i])
        .collect();
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for (step, chunk) in order.chunks(r.batch).enumerate() {
        let b = make_batch(ds, chunk, &cfg.data, true, seeds.augment, epoch)?;
        let q = smoothed_targets::<f32>(&b.labels, k, eps)?;
        let mut mb = MixBatch { x: b.x, q, boundary: cfg.model.use_word_boundary.then_some(b.boundary) };
        if r.mixup {
            let mut rng = Rng::derive(seeds.augment, &[STREAM_MIX, epoch as u64, step as u64]);
            mb = mixup_batch(&mb, r.alpha, r.mixup_per_sample, &mut rng)?.0;
        }
        let mut g = Graph::new();
        let x = g.constant(mb.x);
        let boundary = mb.boundary.map(|m| g.constant(m));
        let mut drop_rng = Rng::derive(seeds.model, &[STREAM_DROPOUT, epoch as u64, step as u64]);
        let logits = model.forward(&mut g, store, x, boundary, Mode::Train, &mut drop_rng)?;
        let loss = g.softmax_cross_entropy(logits, mb.q)?;
        let lv = g.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {lv} at epoch {epoch}, step {}", step + 1)));
        }
        let preds = g.value(logits).argmax_rows();
        correct += preds.iter().zip(&b.labels).filter(|(p, l)| p == l).count();
        loss_sum += lv as f64 * chunk.len() as f64;
        g.backward(loss, store)?;
        drop(g);
        adam.step(store, lr)?;
    }
    let n = order.len() as f64;
    Ok(EpochStats { loss: loss_sum / n, acc: correct as f64 / n })
}

/// Trains `cfg` on the dataset in `data_dir`, writing `config.json`,
/// `metrics.csv`, `best.lkpt` and `last.lkpt` into `out_dir`.
///
/// Every random draw comes from a stream derived from `recipe.seed`, the
/// epoch and the step, so two runs of one config write identical files and a
/// resumed run continues exactly where the interrupted one stopped.
pub fn run_train(cfg: &RunConfig, data_dir: &Path, out_dir: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let ds = Dataset::open(data_dir, &cfg.data)?;
    if ds.num_classes() != cfg.model.num_classes {
        return Err(Error::config(
            "model.num_classes",
            format!("{} but the dataset has {} classes", cfg.model.num_classes, ds.num_classes()),
        ));
    }
    let mut train_idx = ds.indices(Split::Train);
    if let Some(n) = cfg.data.train_limit {
        train_idx.truncate(n);
    }
    let val_idx = ds.indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Data("training needs non-empty train and val splits".into()));
    }
    fs::create_dir_all(out_dir)?;
    cfg.save(&out_dir.join(CONFIG_FILE))?;
    let metrics = out_dir.join(METRICS_FILE);

    let seeds = RunSeeds::from_root(cfg.recipe.seed);
    let (model, mut store, mut adam, mut sched, mut state) = match &opts.resume {
        None => {
            let (model, store) = LipModel::init::<f32>(&cfg.model, seeds.model)?;
            let adam = Adam::new(&store, cfg.recipe.adam())?;
            let sched = Scheduler::new(&cfg.recipe);
            let state = TrainState {
                epoch: 0,
                adam_step: 0,
                scheduler: sched.state.clone(),
                best_val_acc: None,
                best_epoch: 0,
                seeds,
            };
            (model, store, adam, sched, state)
        }
        Some(path) => {
            let (saved, model, store, ckpt) = load_run_checkpoint(path)?;
            if saved.hash() != cfg.hash() {
                return Err(Error::config("<root>", "resume checkpoint was written by a different config"));
            }
            let state: CheckpointState = serde_json::from_value(ckpt.state.clone())?;
            let mut adam = Adam::new(&store, cfg.recipe.adam())?;
            for (i, (m, v)) in optim_names(&store).enumerate() {
                let fetch = |n: &str| {
                    ckpt.tensor(n).cloned().ok_or_else(|| Error::Format(format!("checkpoint lacks `{n}`")))
                };
                adam.m[i] = fetch(&m)?;
                adam.v[i] = fetch(&v)?;
            }
            adam.step = state.train.adam_step;
            let mut sched = Scheduler::new(&cfg.recipe);
            sched.state = state.train.scheduler.clone();
            (model, store, adam, sched, state.train)
        }
    };
    reset_metrics(&metrics, state.epoch)?;

    let total = cfg.recipe.total_epochs;
    let stop = opts.stop_after.map_or(total, |n| (state.epoch + n).min(total));
    let (mut last_train, mut last_val) = (f64::NAN, f64::NAN);
    while state.epoch < stop {
        let epoch = state.epoch + 1;
        let lr = sched.lr();
        let tr = train_epoch(cfg, &model, &mut store, &mut adam, &ds, &train_idx, &seeds, epoch, lr)?;
        let val = evaluate(&model, &mut store, &ds, &val_idx, &cfg.data, cfg.recipe.batch)?;
        append_rows(
            &metrics,
            &[
                MetricsRow { epoch, phase: Phase::Train, lr, loss: tr.loss, acc: tr.acc },
                MetricsRow { epoch, phase: Phase::Val, lr, loss: val.loss, acc: val.accuracy },
            ],
        )?;
        info!(
            "epoch {epoch}/{total} lr {lr:.3e} train loss {:.4} acc {:.4} | val loss {:.4} acc {:.4}",
            tr.loss, tr.acc, val.loss, val.accuracy
        );
        sched.epoch_end(1.0 - val.accuracy)?;
        state.epoch = epoch;
        state.adam_step = adam.step;
        state.scheduler = sched.state.clone();
        let improved = state.best_val_acc.is_none_or(|b| val.accuracy > b);
        if improved {
            state.best_val_acc = Some(val.accuracy);
            state.best_epoch = epoch;
            save(&out_dir.join(BEST_CHECKPOINT), cfg, &store, &adam, &state)?;
        }
        save(&out_dir.join(LAST_CHECKPOINT), cfg, &store, &adam, &state)?;
        (last_train, last_val) = (tr.acc, val.accuracy);
    }
    Ok(TrainSummary {
        epochs: state.epoch,
        best_val_acc: state.best_val_acc.unwrap_or(f64::NAN),
        best_epoch: state.best_epoch,
        last_train_acc: last_train,
        last_val_acc: last_val,
        config_hash: cfg.hash(),
    })
}
