use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Shrink weights directly instead of adding `wd · w` to the gradient.
    pub decoupled: bool,
    /// Skip decay for biases and batch-norm affine parameters.
    pub exclude_norm_and_bias: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: false,
            exclude_norm_and_bias: false,
        }
    }
}

/// Adam with first and second moments per parameter.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub cfg: AdamConfig,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, cfg: AdamConfig) -> Result<Self> {
        let zeros = store
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Adam { cfg, m: zeros.clone(), v: zeros, step: 0 })
    }

    fn decays(&self, kind: ParamKind) -> bool {
        self.cfg.weight_decay > 0.0 && (!self.cfg.exclude_norm_and_bias || kind == ParamKind::Weight)
    }

    /// One update at learning rate `lr`, then zeroes every gradient.
    pub fn step(&mut self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        if !store.grads_ready() {
            return Err(Error::invalid("optimizer step without populated gradients"));
        }
        if self.m.len() != store.params().len() {
            return Err(Error::invalid("optimizer state does not match the parameter set"));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let wd = self.cfg.weight_decay;
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let decay = self.decays(p.kind);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let mut g = p.grad.data()[k].f64();
                let wv = w.f64();
                if decay && !self.cfg.decoupled {
                    g += wd * wv;
                }
                let mk = b1 * m[k].f64() + (1.0 - b1) * g;
                let vk = b2 * v[k].f64() + (1.0 - b2) * g * g;
                m[k] = S::of(mk);
                v[k] = S::of(vk);
                let mut next = wv - lr * (mk / c1) / ((vk / c2).sqrt() + self.cfg.eps);
                if decay && self.cfg.decoupled {
                    next -= lr * wd * wv;
                }
                if !next.is_finite() {
                    return Err(Error::Numeric(format!("parameter `{}` became non-finite", p.name)));
                }
                *w = S::of(next);
            }
        }
        store.zero_grad();
        Ok(())
    }
}
