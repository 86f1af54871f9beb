//! Parameterized layers. Each layer registers its tensors in a
//! [`ParamStore`] on construction and records ops on a [`Graph`] when called.

use super::graph::{Graph, Mode, Var};
use super::init::init_dense_uniform;
use super::param::{BufferId, ParamId, ParamKind, ParamStore};
use crate::error::Result;
use crate::tensor::{Rng, Scalar, Tensor};

/// Default batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Default running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: [usize; 2],
    pub pad: [usize; 2],
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        pad: [usize; 2],
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let vol = kernel[0] * kernel[1];
        let w = init_dense_uniform(rng, cin * vol, cout * vol, &[cout, cin, kernel[0], kernel[1]])?;
        let w = store.add(format!("{name}.weight"), ParamKind::Weight, w)?;
        let b = if bias {
            Some(store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[cout])?)?)
        } else {
            None
        };
        Ok(Conv2d { w, b, stride, pad })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let vol: usize = kernel.iter().product();
        let w = init_dense_uniform(
            rng,
            cin * vol,
            cout * vol,
            &[cout, cin, kernel[0], kernel[1], kernel[2]],
        )?;
        let w = store.add(format!("{name}.weight"), ParamKind::Weight, w)?;
        let b = if bias {
            Some(store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[cout])?)?)
        } else {
            None
        };
        Ok(Conv3d { w, b, stride, pad })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.conv3d(x, w, b, self.stride, self.pad)
    }
}

/// Batch normalization with γ = 1, β = 0 at construction.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add(format!("{name}.gamma"), ParamKind::NormScale, Tensor::ones(&[channels])?)?,
            beta: store.add(format!("{name}.beta"), ParamKind::NormShift, Tensor::zeros(&[channels])?)?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])?)?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])?)?,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }

    /// Train mode normalizes with batch statistics and updates the running
    /// averages (variance stored unbiased); eval mode uses the running averages.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &mut ParamStore<S>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Train => {
                let count = g.value(x).len() / g.value(x).shape()[1];
                let (y, mean, var) = g.batchnorm_train(x, gamma, beta, self.eps)?;
                let m = S::of(self.momentum);
                let unbias = S::of(count as f64 / (count as f64 - 1.0));
                let rm = store.buffer_mut(self.running_mean).value.data_mut();
                for (r, &b) in rm.iter_mut().zip(&mean) {
                    *r = (S::one() - m) * *r + m * b;
                }
                let rv = store.buffer_mut(self.running_var).value.data_mut();
                for (r, &b) in rv.iter_mut().zip(&var) {
                    *r = (S::one() - m) * *r + m * b * unbias;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = store.buffer(self.running_mean).value.data().to_vec();
                let var = store.buffer(self.running_var).value.data().to_vec();
                g.batchnorm_eval(x, gamma, beta, &mean, &var, self.eps)
            }
        }
    }
}

/// How a [`Linear`] layer draws its initial weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LinearInit {
    /// Dense uniform on ±√(2/(d_in+d_out)), zero bias.
    Glorot,
    /// Weights and bias uniform on ±bound.
    Uniform(f64),
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: LinearInit,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (w, b) = match init {
            LinearInit::Glorot => (
                init_dense_uniform(rng, d_in, d_out, &[d_out, d_in])?,
                Tensor::zeros(&[d_out])?,
            ),
            LinearInit::Uniform(a) => (
                crate::tensor::rand_uniform(rng, &[d_out, d_in], -a, a)?,
                crate::tensor::rand_uniform(rng, &[d_out], -a, a)?,
            ),
        };
        let w = store.add(format!("{name}.weight"), ParamKind::Weight, w)?;
        let b = if bias {
            Some(store.add(format!("{name}.bias"), ParamKind::Bias, b)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}
