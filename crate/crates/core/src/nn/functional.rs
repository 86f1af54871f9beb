//! Tensor-in, tensor-out forms of the layer ops.
//!
//! Each function records a one-op graph and returns its value, so it runs
//! the same kernel as the differentiable path.

use super::graph::{Activation, Graph, Mode};
use super::layers::{BN_EPS, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

pub fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
    let bv = b.map(|b| g.input(b.clone()));
    let y = g.conv2d(xv, wv, bv, [stride; 2], [pad; 2])?;
    Ok(g.value(y).clone())
}

pub fn conv3d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
    let bv = b.map(|b| g.input(b.clone()));
    let y = g.conv3d(xv, wv, bv, stride, pad)?;
    Ok(g.value(y).clone())
}

/// Standalone batch-norm state: affine parameters plus running statistics.
#[derive(Clone, Debug)]
pub struct BatchNormState<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub momentum: f64,
    pub eps: f64,
}

impl<S: Scalar> BatchNormState<S> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNormState {
            gamma: Tensor::ones(&[channels])?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::ones(&[channels])?,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }
}

pub fn batchnorm_forward<S: Scalar>(x: &Tensor<S>, state: &mut BatchNormState<S>, mode: Mode) -> Result<Tensor<S>> {
    if x.rank() < 2 || x.shape()[1] != state.gamma.len() {
        return Err(Error::shape("batchnorm", x.shape(), state.gamma.shape()));
    }
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.input(x.clone()), g.input(state.gamma.clone()), g.input(state.beta.clone()));
    match mode {
        Mode::Train => {
            if x.shape()[0] < 2 {
                return Err(Error::invalid("training-mode batch norm needs a batch of at least 2"));
            }
            let count = (x.len() / x.shape()[1]) as f64;
            let (y, mean, var) = g.batchnorm_train(xv, gv, bv, state.eps)?;
            let m = state.momentum;
            for (r, b) in state.running_mean.data_mut().iter_mut().zip(mean) {
                *r = S::of((1.0 - m) * r.f64() + m * b.f64());
            }
            for (r, b) in state.running_var.data_mut().iter_mut().zip(var) {
                *r = S::of((1.0 - m) * r.f64() + m * b.f64() * count / (count - 1.0));
            }
            Ok(g.value(y).clone())
        }
        Mode::Eval => {
            let y = g.batchnorm_eval(
                xv,
                gv,
                bv,
                state.running_mean.data(),
                state.running_var.data(),
                state.eps,
            )?;
            Ok(g.value(y).clone())
        }
    }
}

pub fn activation<S: Scalar>(x: &Tensor<S>, kind: Activation) -> Tensor<S> {
    x.map(|v| kind.apply(v))
}

pub fn dropout_forward<S: Scalar>(x: &Tensor<S>, p: f64, rng: &mut Rng, mode: Mode) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = g.dropout(xv, p, mode, rng)?;
    Ok(g.value(y).clone())
}

pub fn linear_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: Option<&Tensor<S>>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
    let bv = b.map(|b| g.input(b.clone()));
    let y = g.linear(xv, wv, bv)?;
    Ok(g.value(y).clone())
}

pub fn global_avgpool<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = g.global_avgpool(xv)?;
    Ok(g.value(y).clone())
}
