//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::param::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{rand_uniform, Rng, Tensor};

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradReport {
    /// max |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// Which tensor and flat index produced the worst error.
    pub worst: String,
    pub checked: usize,
}

/// Options for [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many entries per tensor, sampled without replacement.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_entries: None,
            seed: 0,
        }
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` maps the input vars to an output of any shape; the scalar checked is a
/// fixed random projection of that output. `f` must be deterministic across
/// calls (seed any dropout inside it identically every time).
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    store: &mut ParamStore<f64>,
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &mut ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = Rng::new(opts.seed);
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, store, &vars)?;
        rand_uniform::<f64>(&mut rng, g.value(out).shape(), -1.0, 1.0)?
    };
    let eval = |inputs: &[Tensor<f64>], store: &mut ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, store, &vars)?;
        let loss = g.project(out, weights.clone())?;
        g.value(loss).item()
    };

    store.zero_grad();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, store, &vars)?;
    let loss = g.project(out, weights.clone())?;
    let grads = g.backward(loss, store)?;
    let input_grads: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()).unwrap()))
        .collect();
    let param_grads: Vec<Tensor<f64>> = store.params().iter().map(|p| p.grad.clone()).collect();

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let pick = |len: usize, rng: &mut Rng| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..len).collect();
        if let Some(m) = opts.max_entries {
            if m < len {
                rng.shuffle(&mut idx);
                idx.truncate(m);
            }
        }
        idx
    };
    let h = opts.step;
    let record = |report: &mut GradReport, what: String, analytic: f64, numeric: f64| {
        let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = format!("{what}: analytic {analytic:.3e}, numeric {numeric:.3e}");
        }
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        for j in pick(t.len(), &mut rng) {
            let orig = t.data()[j];
            work[k].data_mut()[j] = orig + h;
            let up = eval(&work, store)?;
            work[k].data_mut()[j] = orig - h;
            let down = eval(&work, store)?;
            work[k].data_mut()[j] = orig;
            record(&mut report, format!("input {k}[{j}]"), input_grads[k].data()[j], (up - down) / (2.0 * h));
        }
    }
    for (pi, grad) in param_grads.iter().enumerate() {
        let len = grad.len();
        for j in pick(len, &mut rng) {
            let orig = store.params()[pi].value.data()[j];
            store.params_mut()[pi].value.data_mut()[j] = orig + h;
            let up = eval(inputs, store)?;
            store.params_mut()[pi].value.data_mut()[j] = orig - h;
            let down = eval(inputs, store)?;
            store.params_mut()[pi].value.data_mut()[j] = orig;
            let name = store.params()[pi].name.clone();
            record(&mut report, format!("param {name}[{j}]"), grad.data()[j], (up - down) / (2.0 * h));
        }
    }
    if report.checked == 0 {
        return Err(Error::invalid("gradient check had nothing to check"));
    }
    Ok(report)
}
