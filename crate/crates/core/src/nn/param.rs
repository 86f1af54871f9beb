use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a trainable parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Handle to a non-trainable buffer (batch-norm running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Role of a parameter; the optimizer can exclude biases and norm affines from decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

/// A trainable tensor with its gradient slot. `value.shape() == grad.shape()` always.
#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct Buffer<S> {
    pub name: String,
    pub value: Tensor<S>,
}

/// Owns every parameter and buffer of a model, addressed by id or unique name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    buffers: Vec<Buffer<S>>,
    names: HashMap<String, usize>,
    buffer_names: HashMap<String, usize>,
    grads_ready: bool,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            names: HashMap::new(),
            buffer_names: HashMap::new(),
            grads_ready: false,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains_key(&name) || self.buffer_names.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape())?;
        self.names.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            kind,
            value,
            grad,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<BufferId> {
        let name = name.into();
        if self.names.contains_key(&name) || self.buffer_names.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate buffer name `{name}`")));
        }
        self.buffer_names.insert(name.clone(), self.buffers.len());
        self.buffers.push(Buffer { name, value });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<S> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer<S> {
        &mut self.buffers[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).map(|&i| ParamId(i))
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffer_names.get(name).map(|&i| BufferId(i))
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<S>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<S>] {
        &mut self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
        }
        self.grads_ready = false;
    }

    /// True once a backward pass (or [`ParamStore::set_grad`]) has written
    /// gradients since the last [`ParamStore::zero_grad`].
    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    /// Overwrites one gradient slot directly.
    pub fn set_grad(&mut self, id: ParamId, g: Tensor<S>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.shape() != g.shape() {
            return Err(Error::shape("set_grad", p.grad.shape(), g.shape()));
        }
        p.grad = g;
        self.grads_ready = true;
        Ok(())
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<S>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.shape() != g.shape() {
            return Err(Error::shape("grad accumulate", p.grad.shape(), g.shape()));
        }
        for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
        self.grads_ready = true;
        Ok(())
    }
}
