//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each method evaluates
//! its op eagerly, appends a node holding the result plus whatever the
//! backward rule needs, and returns a [`Var`] handle. [`Graph::backward`]
//! walks the tape in reverse, producing gradients for every node and adding
//! parameter gradients into the [`ParamStore`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{self, BnCache, ConvGeom, ConvShape};
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{gemm, strides, MatView, Reduce, Rng, Scalar, Tensor};

static NEXT_GRAPH: AtomicU32 = AtomicU32::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    index: usize,
}

/// Training or evaluation behavior for batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Relu => x.max(S::zero()),
            Activation::Sigmoid => S::one() / (S::one() + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }
}

enum Op<S> {
    Leaf,
    /// Input that never receives a gradient.
    Constant,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: S },
    Act { x: Var, kind: Activation },
    Dropout { x: Var, mask: Vec<S> },
    Conv { x: Var, w: Var, b: Option<Var>, shape: ConvShape },
    BnTrain { x: Var, gamma: Var, beta: Var, cache: BnCache<S>, dims: [usize; 3] },
    BnEval { x: Var, gamma: Var, beta: Var, mean: Vec<S>, inv_std: Vec<S>, dims: [usize; 3] },
    MaxPool { x: Var, argmax: Vec<usize> },
    Mean { x: Var, axes: Vec<usize> },
    ChannelScale { x: Var, g: Var },
    Permute { x: Var, axes: Vec<usize> },
    Reshape { x: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Select { x: Var, axis: usize, index: usize },
    Stack { xs: Vec<Var>, axis: usize },
    SoftmaxXent { logits: Var, targets: Tensor<S>, probs: Vec<S> },
    Project { x: Var, weights: Tensor<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<S> {
    graph: u32,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the backward root with respect to `v`, if `v` influenced it.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }
}

/// Operation tape for one forward pass.
pub struct Graph<S: Scalar> {
    id: u32,
    nodes: Vec<Node<S>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::invalid("variable does not belong to this graph"));
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        assert_eq!(v.graph, self.id, "variable from another graph");
        &self.nodes[v.index].value
    }

    fn val(&self, v: Var) -> Result<&Tensor<S>> {
        self.check(v)?;
        Ok(&self.nodes[v.index].value)
    }

    /// Adds a constant input (gradients are still reported for it).
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Adds an input that never receives a gradient, so ops consuming it can
    /// skip their input-gradient work.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Constant)
    }

    /// Brings a parameter onto the tape; repeated calls reuse one node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    /// `y = x·wᵀ + b` for `x: [B, d]`, `w: [h, d]`, `b: [h]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.val(x)?;
        let wv = self.val(w)?;
        let ((bsz, d), (h, d2)) = match (rows_cols(xv.shape()), rows_cols(wv.shape())) {
            (Some(a), Some(b)) if a.1 == b.1 => (a, b),
            _ => return Err(Error::shape("linear", xv.shape(), wv.shape())),
        };
        debug_assert_eq!(d, d2);
        let mut out = vec![S::zero(); bsz * h];
        gemm(
            S::one(),
            MatView::row_major(xv.data(), bsz, d),
            MatView::row_major(wv.data(), h, d).t(),
            S::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bv = self.val(b)?;
            if bv.shape() != [h] {
                return Err(Error::shape("linear bias", bv.shape(), &[h]));
            }
            for row in out.chunks_mut(h) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![bsz, h], out), Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.val(a)?.matmul(self.val(b)?)?;
        Ok(self.push(y, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.val(a)?.add(self.val(b)?)?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.val(a)?.sub(self.val(b)?)?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.val(a)?.mul(self.val(b)?)?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    /// `y = scale·x + shift` with constant scalars.
    pub fn affine(&mut self, x: Var, scale: S, shift: S) -> Result<Var> {
        let y = self.val(x)?.map(|v| scale * v + shift);
        Ok(self.push(y, Op::Affine { x, scale }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let y = self.val(x)?.map(|v| kind.apply(v));
        Ok(self.push(y, Op::Act { x, kind }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        self.check(x)?;
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = S::of(1.0 / (1.0 - p));
        let xv = self.val(x)?;
        let mask: Vec<S> = (0..xv.len())
            .map(|_| if rng.bernoulli(p) { S::zero() } else { keep })
            .collect();
        let y = Tensor::from_parts(
            xv.shape().to_vec(),
            xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
        );
        Ok(self.push(y, Op::Dropout { x, mask }))
    }

    /// 2D cross-correlation: `x: [N, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 2], pad: [usize; 2]) -> Result<Var> {
        let (xs, ws) = (self.val(x)?.shape().to_vec(), self.val(w)?.shape().to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let geom = ConvGeom::new([1, ws[2], ws[3]], [1, stride[0], stride[1]], [0, pad[0], pad[1]])?;
        self.conv_nd(x, w, b, [xs[0], xs[1], 1, xs[2], xs[3]], ws[0], ws[1], geom, xs.len())
    }

    /// 3D cross-correlation: `x: [N, Cin, T, H, W]`, `w: [Cout, Cin, kt, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let (xs, ws) = (self.val(x)?.shape().to_vec(), self.val(w)?.shape().to_vec());
        if xs.len() != 5 || ws.len() != 5 {
            return Err(Error::shape("conv3d", &xs, &ws));
        }
        let geom = ConvGeom::new([ws[2], ws[3], ws[4]], stride, pad)?;
        self.conv_nd(x, w, b, [xs[0], xs[1], xs[2], xs[3], xs[4]], ws[0], ws[1], geom, xs.len())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_nd(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        xs: [usize; 5],
        cout: usize,
        cin_w: usize,
        geom: ConvGeom,
        rank: usize,
    ) -> Result<Var> {
        let [n, cin, t, h, wd] = xs;
        if cin != cin_w {
            return Err(Error::invalid(format!(
                "convolution expects {cin_w} input channels, input has {cin}"
            )));
        }
        let in_dims = [t, h, wd];
        let out_dims = geom.out_dims(in_dims)?;
        let shape = ConvShape { n, cin, cout, in_dims, out_dims, geom };
        let bias = match b {
            Some(b) => {
                let bv = self.val(b)?;
                if bv.shape() != [cout] {
                    return Err(Error::shape("conv bias", bv.shape(), &[cout]));
                }
                Some(bv.data().to_vec())
            }
            None => None,
        };
        let y = kernels::conv_forward(&shape, self.val(x)?.data(), self.val(w)?.data(), bias.as_deref());
        let out_shape = if rank == 4 {
            vec![n, cout, out_dims[1], out_dims[2]]
        } else {
            vec![n, cout, out_dims[0], out_dims[1], out_dims[2]]
        };
        Ok(self.push(Tensor::from_parts(out_shape, y), Op::Conv { x, w, b, shape }))
    }

    fn channel_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<[usize; 3]> {
        let xs = self.val(x)?.shape();
        if xs.len() < 2 {
            return Err(Error::invalid("batch norm needs [N, C, ...] input"));
        }
        let (n, c) = (xs[0], xs[1]);
        let rest: usize = xs[2..].iter().product();
        for p in [gamma, beta] {
            let ps = self.val(p)?.shape();
            if ps != [c] {
                return Err(Error::shape("batchnorm channels", ps, &[c]));
            }
        }
        Ok([n, c, rest])
    }

    /// Training-mode batch norm over all non-channel axes.
    /// Returns the output and the batch mean and biased variance per channel.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<S>, Vec<S>)> {
        let dims = self.channel_dims(x, gamma, beta)?;
        let [n, c, rest] = dims;
        if n * rest < 2 {
            return Err(Error::invalid(
                "training-mode batch norm needs at least two values per channel",
            ));
        }
        let (y, cache, mean, var) = kernels::batchnorm_train(
            self.val(x)?.data(),
            n,
            c,
            rest,
            self.val(gamma)?.data(),
            self.val(beta)?.data(),
            S::of(eps),
        );
        let shape = self.val(x)?.shape().to_vec();
        let v = self.push(Tensor::from_parts(shape, y), Op::BnTrain { x, gamma, beta, cache, dims });
        Ok((v, mean, var))
    }

    /// Eval-mode batch norm using fixed statistics.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[S], var: &[S], eps: f64) -> Result<Var> {
        let dims = self.channel_dims(x, gamma, beta)?;
        let [n, c, rest] = dims;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batchnorm stats", &[mean.len(), var.len()], &[c, c]));
        }
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + S::of(eps)).sqrt()).collect();
        let (xv, g, b) = (self.val(x)?, self.val(gamma)?.data(), self.val(beta)?.data());
        let mut y = xv.data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                for v in &mut y[(i * c + ch) * rest..(i * c + ch + 1) * rest] {
                    *v = g[ch] * (*v - mean[ch]) * inv_std[ch] + b[ch];
                }
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, y),
            Op::BnEval { x, gamma, beta, mean: mean.to_vec(), inv_std, dims },
        ))
    }

    /// Max pooling over the trailing three axes of `[N, C, T, H, W]`.
    pub fn maxpool3d(&mut self, x: Var, kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let xs = self.val(x)?.shape().to_vec();
        if xs.len() != 5 {
            return Err(Error::invalid(format!("maxpool3d expects rank 5, got {xs:?}")));
        }
        let geom = ConvGeom::new(kernel, stride, pad)?;
        if pad.iter().zip(&kernel).any(|(&p, &k)| 2 * p > k) {
            return Err(Error::invalid("pooling padding must be less than half the kernel"));
        }
        let in_dims = [xs[2], xs[3], xs[4]];
        let (y, argmax) = kernels::maxpool_forward(self.val(x)?.data(), xs[0] * xs[1], in_dims, &geom)?;
        let o = geom.out_dims(in_dims)?;
        Ok(self.push(
            Tensor::from_parts(vec![xs[0], xs[1], o[0], o[1], o[2]], y),
            Op::MaxPool { x, argmax },
        ))
    }

    /// Mean over `axes`, which are removed from the shape.
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let y = self.val(x)?.reduce(axes, Reduce::Mean)?;
        Ok(self.push(y, Op::Mean { x, axes: axes.to_vec() }))
    }

    /// Global average pooling of `[N, C, ...spatial]` to `[N, C]`.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let rank = self.val(x)?.rank();
        if rank < 3 {
            return Err(Error::invalid("global pooling needs spatial axes"));
        }
        let axes: Vec<usize> = (2..rank).collect();
        self.mean(x, &axes)
    }

    /// Scales each `[n, c]` plane of `x: [N, C, ...]` by `g[n, c]`.
    pub fn channel_scale(&mut self, x: Var, g: Var) -> Result<Var> {
        let (xv, gv) = (self.val(x)?, self.val(g)?);
        if xv.rank() < 2 || gv.shape() != &xv.shape()[..2] {
            return Err(Error::shape("channel_scale", xv.shape(), gv.shape()));
        }
        let rest: usize = xv.shape()[2..].iter().product();
        let mut y = xv.data().to_vec();
        for (plane, &s) in y.chunks_mut(rest).zip(gv.data()) {
            plane.iter_mut().for_each(|v| *v *= s);
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, y), Op::ChannelScale { x, g }))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let y = self.val(x)?.permute(axes)?;
        Ok(self.push(y, Op::Permute { x, axes: axes.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.val(x)?.clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        for &v in xs {
            self.check(v)?;
        }
        let parts: Vec<&Tensor<S>> = xs.iter().map(|&v| &self.nodes[v.index].value).collect();
        let y = Tensor::concat(&parts, axis)?;
        Ok(self.push(y, Op::Concat { xs: xs.to_vec(), axis }))
    }

    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let y = self.val(x)?.select(axis, index)?;
        Ok(self.push(y, Op::Select { x, axis, index }))
    }

    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        for &v in xs {
            self.check(v)?;
        }
        let parts: Vec<&Tensor<S>> = xs.iter().map(|&v| &self.nodes[v.index].value).collect();
        let y = Tensor::stack(&parts, axis)?;
        Ok(self.push(y, Op::Stack { xs: xs.to_vec(), axis }))
    }

    /// Batch-mean cross-entropy between `softmax(logits)` and target
    /// distributions, both `[B, N]`. Uses max-subtracted log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Tensor<S>) -> Result<Var> {
        let lv = self.val(logits)?;
        if lv.rank() != 2 || lv.shape() != targets.shape() {
            return Err(Error::shape("cross_entropy", lv.shape(), targets.shape()));
        }
        let (b, n) = (lv.shape()[0], lv.shape()[1]);
        let mut probs = vec![S::zero(); b * n];
        let mut total = S::zero();
        for r in 0..b {
            let row = &lv.data()[r * n..(r + 1) * n];
            let q = &targets.data()[r * n..(r + 1) * n];
            let m = row.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
            let sum: S = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            for j in 0..n {
                probs[r * n + j] = (row[j] - lse).exp();
                total -= q[j] * (row[j] - lse);
            }
        }
        let loss = Tensor::scalar(total / S::of(b as f64));
        Ok(self.push(loss, Op::SoftmaxXent { logits, targets, probs }))
    }

    /// `Σ weights ⊙ x`, a scalar; handy as a generic loss for gradient checks.
    pub fn project(&mut self, x: Var, weights: Tensor<S>) -> Result<Var> {
        let xv = self.val(x)?;
        if xv.shape() != weights.shape() {
            return Err(Error::shape("project", xv.shape(), weights.shape()));
        }
        let s: S = xv.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::Project { x, weights }))
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<S>) -> Result<Gradients<S>> {
        self.check(loss)?;
        let shape = self.nodes[loss.index].value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::invalid(format!(
                "backward() needs a scalar root, got shape {shape:?}; use backward_with"
            )));
        }
        self.backward_with(loss, Tensor::full(&shape, S::one())?, store)
    }

    /// Backpropagates an explicit upstream gradient from `out`.
    pub fn backward_with(&self, out: Var, upstream: Tensor<S>, store: &mut ParamStore<S>) -> Result<Gradients<S>> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward called before any forward op was recorded"));
        }
        self.check(out)?;
        let out_shape = self.nodes[out.index].value.shape();
        if upstream.shape() != out_shape {
            return Err(Error::shape("backward upstream", upstream.shape(), out_shape));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.index] = Some(upstream);
        for i in (0..=out.index).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads, store)?;
            // Only leaves are queried afterwards; dropping the rest bounds peak memory.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        Ok(Gradients { graph: self.id, grads })
    }

    fn backward_node(
        &self,
        i: usize,
        gy: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        store: &mut ParamStore<S>,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let v = |var: Var| &self.nodes[var.index].value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Param(id) => store.accumulate_grad(*id, gy)?,
            Op::Linear { x, w, b } => {
                let (xv, wv) = (v(*x), v(*w));
                let (bsz, d) = (xv.shape()[0], xv.shape()[1]);
                let h = wv.shape()[0];
                let mut dx = vec![S::zero(); bsz * d];
                gemm(
                    S::one(),
                    MatView::row_major(gy.data(), bsz, h),
                    MatView::row_major(wv.data(), h, d),
                    S::zero(),
                    &mut dx,
                );
                let mut dw = vec![S::zero(); h * d];
                gemm(
                    S::one(),
                    MatView::row_major(gy.data(), bsz, h).t(),
                    MatView::row_major(xv.data(), bsz, d),
                    S::zero(),
                    &mut dw,
                );
                accumulate(grads, *x, Tensor::from_parts(vec![bsz, d], dx));
                accumulate(grads, *w, Tensor::from_parts(vec![h, d], dw));
                if let Some(b) = b {
                    let mut db = vec![S::zero(); h];
                    for row in gy.data().chunks(h) {
                        for (a, &g) in db.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    accumulate(grads, *b, Tensor::from_parts(vec![h], db));
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (v(*a), v(*b));
                accumulate(grads, *a, gy.matmul(&bv.t()?)?);
                accumulate(grads, *b, av.t()?.matmul(gy)?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, gy.clone());
                accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, gy.clone());
                accumulate(grads, *b, gy.scale(-S::one()));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, gy.mul(v(*b))?);
                accumulate(grads, *b, gy.mul(v(*a))?);
            }
            Op::Affine { x, scale } => accumulate(grads, *x, gy.scale(*scale)),
            Op::Act { x, kind } => {
                let y = &node.value;
                let dx = match kind {
                    Activation::Relu => gy.zip_map(v(*x), "relu", |g, xv| if xv > S::zero() { g } else { S::zero() })?,
                    Activation::Sigmoid => gy.zip_map(y, "sigmoid", |g, s| g * s * (S::one() - s))?,
                    Activation::Tanh => gy.zip_map(y, "tanh", |g, t| g * (S::one() - t * t))?,
                };
                accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<S> = gy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                accumulate(grads, *x, Tensor::from_parts(gy.shape().to_vec(), dx));
            }
            Op::Conv { x, w, b, shape } => {
                let need_dx = !matches!(self.nodes[x.index].op, Op::Constant);
                let (dx, dw, db) = kernels::conv_backward(shape, v(*x).data(), v(*w).data(), gy.data(), need_dx);
                if let Some(dx) = dx {
                    accumulate(grads, *x, Tensor::from_parts(v(*x).shape().to_vec(), dx));
                }
                accumulate(grads, *w, Tensor::from_parts(v(*w).shape().to_vec(), dw));
                if let Some(b) = b {
                    accumulate(grads, *b, Tensor::from_parts(vec![shape.cout], db));
                }
            }
            Op::BnTrain { x, gamma, beta, cache, dims } => {
                let [n, c, rest] = *dims;
                let (dx, dg, db) =
                    kernels::batchnorm_train_backward(gy.data(), cache, n, c, rest, v(*gamma).data());
                accumulate(grads, *x, Tensor::from_parts(gy.shape().to_vec(), dx));
                accumulate(grads, *gamma, Tensor::from_parts(vec![c], dg));
                accumulate(grads, *beta, Tensor::from_parts(vec![c], db));
            }
            Op::BnEval { x, gamma, beta, mean, inv_std, dims } => {
                let [n, c, rest] = *dims;
                let (xv, g) = (v(*x).data(), v(*gamma).data());
                let mut dx = vec![S::zero(); xv.len()];
                let mut dg = vec![S::zero(); c];
                let mut db = vec![S::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        for j in (s * c + ch) * rest..(s * c + ch + 1) * rest {
                            let d = gy.data()[j];
                            dx[j] = d * g[ch] * inv_std[ch];
                            dg[ch] += d * (xv[j] - mean[ch]) * inv_std[ch];
                            db[ch] += d;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(gy.shape().to_vec(), dx));
                accumulate(grads, *gamma, Tensor::from_parts(vec![c], dg));
                accumulate(grads, *beta, Tensor::from_parts(vec![c], db));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![S::zero(); v(*x).len()];
                for (&src, &g) in argmax.iter().zip(gy.data()) {
                    dx[src] += g;
                }
                accumulate(grads, *x, Tensor::from_parts(v(*x).shape().to_vec(), dx));
            }
            Op::Mean { x, axes } => {
                accumulate(grads, *x, expand_mean_grad(gy, v(*x).shape(), axes));
            }
            Op::ChannelScale { x, g } => {
                let (xv, gv) = (v(*x), v(*g));
                let rest: usize = xv.shape()[2..].iter().product();
                let mut dx = gy.data().to_vec();
                let mut dg = vec![S::zero(); gv.len()];
                for (p, s) in gv.data().iter().enumerate() {
                    let range = p * rest..(p + 1) * rest;
                    dg[p] = gy.data()[range.clone()]
                        .iter()
                        .zip(&xv.data()[range.clone()])
                        .map(|(&a, &b)| a * b)
                        .sum();
                    dx[range].iter_mut().for_each(|d| *d *= *s);
                }
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                accumulate(grads, *g, Tensor::from_parts(gv.shape().to_vec(), dg));
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (o, &a) in axes.iter().enumerate() {
                    inverse[a] = o;
                }
                accumulate(grads, *x, gy.permute(&inverse)?);
            }
            Op::Reshape { x } => {
                accumulate(grads, *x, gy.clone().reshape(v(*x).shape())?);
            }
            Op::Concat { xs, axis } => {
                let outer: usize = gy.shape()[..*axis].iter().product();
                let inner: usize = gy.shape()[axis + 1..].iter().product();
                let total = gy.shape()[*axis];
                let mut start = 0;
                for &part in xs {
                    let ps = v(part).shape();
                    let width = ps[*axis];
                    let mut d = Vec::with_capacity(v(part).len());
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        d.extend_from_slice(&gy.data()[base..base + width * inner]);
                    }
                    accumulate(grads, part, Tensor::from_parts(ps.to_vec(), d));
                    start += width;
                }
            }
            Op::Select { x, axis, index } => {
                let xs = v(*x).shape();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let mut d = vec![S::zero(); v(*x).len()];
                for o in 0..outer {
                    let dst = (o * xs[*axis] + index) * inner;
                    d[dst..dst + inner].copy_from_slice(&gy.data()[o * inner..(o + 1) * inner]);
                }
                accumulate(grads, *x, Tensor::from_parts(xs.to_vec(), d));
            }
            Op::Stack { xs, axis } => {
                for (k, &part) in xs.iter().enumerate() {
                    accumulate(grads, part, gy.select(*axis, k)?);
                }
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let b = targets.shape()[0];
                let k = gy.item()? / S::of(b as f64);
                let d: Vec<S> = probs
                    .iter()
                    .zip(targets.data())
                    .map(|(&p, &q)| k * (p - q))
                    .collect();
                accumulate(grads, *logits, Tensor::from_parts(targets.shape().to_vec(), d));
            }
            Op::Project { x, weights } => {
                accumulate(grads, *x, weights.scale(gy.item()?));
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut grads[v.index] {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Spreads the gradient of a mean back over the reduced axes.
fn expand_mean_grad<S: Scalar>(gy: &Tensor<S>, in_shape: &[usize], axes: &[usize]) -> Tensor<S> {
    let rank = in_shape.len();
    let reduced: Vec<bool> = (0..rank).map(|a| axes.contains(&a)).collect();
    let count: usize = axes.iter().map(|&a| in_shape[a]).product();
    let out_shape: Vec<usize> = (0..rank).filter(|&a| !reduced[a]).map(|a| in_shape[a]).collect();
    let out_strides = strides(&out_shape);
    let mut kept = vec![0; rank];
    let mut k = 0;
    for a in 0..rank {
        if !reduced[a] {
            kept[a] = out_strides[k];
            k += 1;
        }
    }
    let scale = S::one() / S::of(count as f64);
    let mut d = Vec::with_capacity(in_shape.iter().product());
    crate::tensor::for_each_index(in_shape, |idx| {
        let o: usize = idx.iter().zip(&kept).map(|(i, s)| i * s).sum();
        d.push(gy.data()[o] * scale);
    });
    Tensor::from_parts(in_shape.to_vec(), d)
}
