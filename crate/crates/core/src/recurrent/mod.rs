//! Gated recurrent units, the stacked bidirectional backend, and the
//! temporal-average classification head.
//!
//! Gate convention, per step:
//!
//! ```text
//! z  = σ(W_z x + U_z h + b_z)
//! r  = σ(W_r x + U_r h + b_r)
//! h̃  = tanh(W_h x + b_h_in + r ⊙ (U_h h + b_h_rec))
//! h' = (1 − z) ⊙ h̃ + z ⊙ h
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, LinearInit, Mode, ParamId, ParamKind, ParamStore, Var};
use crate::tensor::{rand_uniform, Rng, Scalar, Tensor};

/// Initial distribution for recurrent weights and biases.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GruInit {
    /// Every recurrent parameter uniform on (−1, 1).
    #[default]
    Unit,
    /// Uniform on ±1/√hidden.
    Scaled,
}

impl GruInit {
    fn bound(self, hidden: usize) -> f64 {
        match self {
            GruInit::Unit => 1.0,
            GruInit::Scaled => 1.0 / (hidden as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GruStackConfig {
    pub layers: usize,
    pub hidden: usize,
    pub bidirectional: bool,
    pub inter_layer_dropout: f64,
    pub init: GruInit,
}

impl Default for GruStackConfig {
    fn default() -> Self {
        GruStackConfig {
            layers: 3,
            hidden: 64,
            bidirectional: true,
            inter_layer_dropout: 0.2,
            init: GruInit::Unit,
        }
    }
}

impl GruStackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("model.backend.layers", "must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(Error::config("model.backend.hidden", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.inter_layer_dropout) {
            return Err(Error::config("model.backend.inter_layer_dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Width of each output step: `hidden`, doubled when bidirectional.
    pub fn output_dim(&self) -> usize {
        self.hidden * if self.bidirectional { 2 } else { 1 }
    }
}

/// Weights of one GRU direction of one layer.
#[derive(Clone, Debug)]
pub struct GruLayerParams {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h_in: ParamId,
    pub b_h_rec: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruLayerParams {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        input: usize,
        hidden: usize,
        init: GruInit,
        rng: &mut Rng,
    ) -> Result<Self> {
        let a = init.bound(hidden);
        let mut add = |suffix: &str, kind: ParamKind, shape: &[usize]| -> Result<ParamId> {
            store.add(format!("{name}.{suffix}"), kind, rand_uniform(rng, shape, -a, a)?)
        };
        Ok(GruLayerParams {
            w_z: add("w_z", ParamKind::Weight, &[hidden, input])?,
            w_r: add("w_r", ParamKind::Weight, &[hidden, input])?,
            w_h: add("w_h", ParamKind::Weight, &[hidden, input])?,
            u_z: add("u_z", ParamKind::Weight, &[hidden, hidden])?,
            u_r: add("u_r", ParamKind::Weight, &[hidden, hidden])?,
            u_h: add("u_h", ParamKind::Weight, &[hidden, hidden])?,
            b_z: add("b_z", ParamKind::Bias, &[hidden])?,
            b_r: add("b_r", ParamKind::Bias, &[hidden])?,
            b_h_in: add("b_h_in", ParamKind::Bias, &[hidden])?,
            b_h_rec: add("b_h_rec", ParamKind::Bias, &[hidden])?,
            input,
            hidden,
        })
    }

    /// All ten parameter ids in declaration order.
    pub fn ids(&self) -> [ParamId; 10] {
        [
            self.w_z, self.w_r, self.w_h, self.u_z, self.u_r, self.u_h, self.b_z, self.b_r, self.b_h_in,
            self.b_h_rec,
        ]
    }

    /// One step given precomputed input projections `xz, xr, xh` (`[B, h]`, biases included).
    fn step_projected<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        proj: [Var; 3],
        h_prev: Var,
    ) -> Result<Var> {
        let [xz, xr, xh] = proj;
        let u_z = g.param(store, self.u_z);
        let u_r = g.param(store, self.u_r);
        let u_h = g.param(store, self.u_h);
        let b_h_rec = g.param(store, self.b_h_rec);
        let hz = g.linear(h_prev, u_z, None)?;
        let z_pre = g.add(xz, hz)?;
        let z = g.sigmoid(z_pre)?;
        let hr = g.linear(h_prev, u_r, None)?;
        let r_pre = g.add(xr, hr)?;
        let r = g.sigmoid(r_pre)?;
        let hh = g.linear(h_prev, u_h, Some(b_h_rec))?;
        let gated = g.mul(r, hh)?;
        let n_pre = g.add(xh, gated)?;
        let n = g.tanh(n_pre)?;
        let diff = g.sub(h_prev, n)?;
        let keep = g.mul(z, diff)?;
        g.add(n, keep)
    }

    fn project_inputs<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<[Var; 3]> {
        let pairs = [(self.w_z, self.b_z), (self.w_r, self.b_r), (self.w_h, self.b_h_in)];
        let mut out = Vec::with_capacity(3);
        for (w, b) in pairs {
            let (w, b) = (g.param(store, w), g.param(store, b));
            out.push(g.linear(x, w, Some(b))?);
        }
        Ok([out[0], out[1], out[2]])
    }

    /// One recurrent step on a batch: `x: [B, d]`, `h_prev: [B, h]`.
    pub fn step<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var, h_prev: Var) -> Result<Var> {
        let proj = self.project_inputs(g, store, x)?;
        self.step_projected(g, store, proj, h_prev)
    }

    /// Runs the direction over `seq: [B, T, d]`, returning per-step states in input time order.
    fn run<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, seq: Var, reverse: bool) -> Result<Vec<Var>> {
        let shape = g.value(seq).shape().to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        if d != self.input {
            return Err(Error::shape("gru input", &shape, &[b, t, self.input]));
        }
        // Input projections for all steps at once, then sliced per step.
        let flat = g.reshape(seq, &[b * t, d])?;
        let proj_all = self.project_inputs(g, store, flat)?;
        let mut proj_seq = Vec::with_capacity(3);
        for p in proj_all {
            proj_seq.push(g.reshape(p, &[b, t, self.hidden])?);
        }
        let mut h = g.input(Tensor::zeros(&[b, self.hidden])?);
        let mut states = vec![h; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let proj = [
                g.select(proj_seq[0], 1, step)?,
                g.select(proj_seq[1], 1, step)?,
                g.select(proj_seq[2], 1, step)?,
            ];
            h = self.step_projected(g, store, proj, h)?;
            states[step] = h;
        }
        Ok(states)
    }
}

/// Single-sample GRU step on plain tensors: `x_t: [d]`, `h_prev: [h]` → `[h]`.
pub fn gru_cell_step<S: Scalar>(
    x_t: &Tensor<S>,
    h_prev: &Tensor<S>,
    store: &ParamStore<S>,
    params: &GruLayerParams,
) -> Result<Tensor<S>> {
    if x_t.shape() != [params.input] || h_prev.shape() != [params.hidden] {
        return Err(Error::shape("gru_cell_step", x_t.shape(), h_prev.shape()));
    }
    let mut g = Graph::new();
    let x = g.input(x_t.clone().reshape(&[1, params.input])?);
    let h = g.input(h_prev.clone().reshape(&[1, params.hidden])?);
    let y = params.step(&mut g, store, x, h)?;
    g.value(y).clone().reshape(&[params.hidden])
}

/// Stacked, optionally bidirectional GRU.
#[derive(Clone, Debug)]
pub struct GruStack {
    pub cfg: GruStackConfig,
    /// `layers[l][0]` runs forward in time, `layers[l][1]` (if present) backward.
    pub layers: Vec<Vec<GruLayerParams>>,
}

impl GruStack {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        input: usize,
        cfg: &GruStackConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut d = input;
        for l in 0..cfg.layers {
            let mut dirs = vec![GruLayerParams::new(store, &format!("{name}.l{l}.fwd"), d, cfg.hidden, cfg.init, rng)?];
            if cfg.bidirectional {
                dirs.push(GruLayerParams::new(store, &format!("{name}.l{l}.bwd"), d, cfg.hidden, cfg.init, rng)?);
            }
            layers.push(dirs);
            d = cfg.output_dim();
        }
        Ok(GruStack { cfg: cfg.clone(), layers })
    }

    /// `seq: [B, T, d]` → `[B, T, h or 2h]`. Dropout sits between layers, train mode only.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        seq: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let shape = g.value(seq).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::invalid(format!("GRU expects [B, T, d], got {shape:?}")));
        }
        let mut x = seq;
        for (l, dirs) in self.layers.iter().enumerate() {
            let fwd = dirs[0].run(g, store, x, false)?;
            let steps = if let Some(bwd_params) = dirs.get(1) {
                let bwd = bwd_params.run(g, store, x, true)?;
                fwd.iter()
                    .zip(&bwd)
                    .map(|(&f, &b)| g.concat(&[f, b], 1))
                    .collect::<Result<Vec<_>>>()?
            } else {
                fwd
            };
            x = g.stack(&steps, 1)?;
            if l + 1 < self.layers.len() {
                x = g.dropout(x, self.cfg.inter_layer_dropout, mode, rng)?;
            }
        }
        Ok(x)
    }
}

/// Single-sequence stack forward on plain tensors: `[T, d]` → `[T, D]`.
pub fn gru_stack_forward<S: Scalar>(
    seq: &Tensor<S>,
    stack: &GruStack,
    store: &ParamStore<S>,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Tensor<S>> {
    if seq.rank() != 2 {
        return Err(Error::invalid(format!("expected [T, d], got {:?}", seq.shape())));
    }
    let (t, d) = (seq.shape()[0], seq.shape()[1]);
    let mut g = Graph::new();
    let x = g.input(seq.clone().reshape(&[1, t, d])?);
    let y = stack.forward(&mut g, store, x, mode, rng)?;
    g.value(y).clone().reshape(&[t, stack.cfg.output_dim()])
}

/// Mean over time followed by a linear classifier.
#[derive(Clone, Debug)]
pub struct TemporalMeanHead {
    pub fc: Linear,
}

impl TemporalMeanHead {
    /// Weights and bias start uniform on [−1, 1].
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        Ok(TemporalMeanHead {
            fc: Linear::new(store, name, d, classes, true, LinearInit::Uniform(1.0), rng)?,
        })
    }

    /// `[B, T, D]` → logits `[B, N]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, seq: Var) -> Result<Var> {
        let pooled = g.mean(seq, &[1])?;
        self.fc.forward(g, store, pooled)
    }
}

/// Single-sequence head on plain tensors: `[T, D]` → `[N]`.
pub fn temporal_mean_head<S: Scalar>(seq_out: &Tensor<S>, store: &ParamStore<S>, head: &TemporalMeanHead) -> Result<Tensor<S>> {
    if seq_out.rank() != 2 {
        return Err(Error::invalid(format!("expected [T, D], got {:?}", seq_out.shape())));
    }
    let (t, d) = (seq_out.shape()[0], seq_out.shape()[1]);
    let mut g = Graph::new();
    let x = g.input(seq_out.clone().reshape(&[1, t, d])?);
    let y = head.forward(&mut g, store, x)?;
    let n = g.value(y).len();
    g.value(y).clone().reshape(&[n])
}
