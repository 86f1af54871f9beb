use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{load_run_checkpoint, STREAM_EVAL};
use crate::data::{make_batch, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::LipModel;
use crate::nn::{Mode, ParamStore};
use crate::tensor::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub correct: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Mean cross-entropy against one-hot targets.
    pub loss: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    /// Per-class table followed by the top-1 line.
    pub fn render(&self) -> String {
        let mut out = String::from("class            correct  total  acc\n");
        for c in &self.per_class {
            let acc = if c.total == 0 { f64::NAN } else { c.correct as f64 / c.total as f64 };
            out.push_str(&format!("{:<16} {:>7}  {:>5}  {:.4}\n", c.class, c.correct, c.total, acc));
        }
        out.push_str(&format!("top-1 accuracy {:.4} over {} clips\n", self.accuracy, self.predictions.len()));
        out
    }

    pub fn predictions_csv(&self) -> String {
        let mut out = String::from("id,label,predicted\n");
        for p in &self.predictions {
            out.push_str(&format!("{},{},{}\n", p.id, p.label, p.predicted));
        }
        out
    }
}

/// Evaluation-mode pass over `indices` (center crop, no augmentation) in
/// batches of `batch`. Each clip's prediction depends only on that clip.
pub fn evaluate(
    model: &LipModel,
    store: &mut ParamStore<f32>,
    ds: &Dataset,
    indices: &[usize],
    data: &crate::data::DataConfig,
    batch: usize,
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let k = ds.num_classes();
    if model.cfg.num_classes != k {
        return Err(Error::Data(format!(
            "model predicts {} classes but the dataset has {k}",
            model.cfg.num_classes
        )));
    }
    let mut per_class: Vec<ClassAccuracy> = ds
        .manifest
        .class_names
        .iter()
        .map(|c| ClassAccuracy { class: c.clone(), correct: 0, total: 0 })
        .collect();
    let mut predictions = Vec::with_capacity(indices.len());
    let mut loss_sum = 0.0;
    for chunk in indices.chunks(batch.max(1)) {
        let b = make_batch(ds, chunk, data, false, 0, 0)?;
        let boundary = model.cfg.use_word_boundary.then_some(&b.boundary);
        // Eval mode draws nothing; the generator only satisfies the signature.
        let logits = model.logits(store, &b.x, boundary, Mode::Eval, &mut Rng::new(STREAM_EVAL))?;
        let preds = logits.argmax_rows();
        for (row, ((id, &label), &pred)) in b.ids.iter().zip(&b.labels).zip(&preds).enumerate() {
            let z: Vec<f64> = logits.data()[row * k..(row + 1) * k].iter().map(|&v| v as f64).collect();
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss_sum += lse - z[label];
            per_class[label].total += 1;
            if pred == label {
                per_class[label].correct += 1;
            }
            predictions.push(Prediction { id: id.clone(), label, predicted: pred });
        }
    }
    let correct: usize = per_class.iter().map(|c| c.correct).sum();
    let n = predictions.len() as f64;
    if !loss_sum.is_finite() {
        return Err(Error::Numeric("evaluation loss is not finite".into()));
    }
    Ok(EvalReport { accuracy: correct as f64 / n, loss: loss_sum / n, per_class, predictions })
}

/// Loads a checkpoint written by training and evaluates it on `split`.
pub fn run_eval(ckpt: &Path, data_dir: &Path, split: Split) -> Result<EvalReport> {
    let (cfg, model, mut store, _) = load_run_checkpoint(ckpt)?;
    let ds = Dataset::open(data_dir, &cfg.data)?;
    let idx = ds.indices(split);
    evaluate(&model, &mut store, &ds, &idx, &cfg.data, cfg.recipe.batch)
}
