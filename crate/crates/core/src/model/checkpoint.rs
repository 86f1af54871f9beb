//! The `LKPT1` checkpoint format.
//!
//! ```text
//! b"LKPT1" | manifest length: u32 LE | manifest JSON | LKT1 blobs...
//! ```
//!
//! The manifest echoes the [`ModelConfig`], carries an opaque training-state
//! document, and lists every tensor with its dtype, shape and byte offset
//! from the start of the blob section.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{read_lkt1, write_lkt1, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"LKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    model: ModelConfig,
    state: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// In-memory checkpoint: config echo, training state and named tensors.
#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub model: ModelConfig,
    pub state: serde_json::Value,
    pub tensors: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Checkpoint<S> {
    /// Captures every parameter and buffer of `store`.
    pub fn from_store(model: &ModelConfig, store: &ParamStore<S>, state: serde_json::Value) -> Self {
        let mut tensors: Vec<(String, Tensor<S>)> =
            store.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        tensors.extend(store.buffers().iter().map(|b| (b.name.clone(), b.value.clone())));
        Checkpoint { model: model.clone(), state, tensors }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies stored values into `store`, which must have been built from the same config.
    pub fn restore_into(&self, store: &mut ParamStore<S>) -> Result<()> {
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor<S>> {
            let t = self
                .tensor(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::shape("checkpoint restore", shape, t.shape()));
            }
            Ok(t.clone())
        };
        for p in store.params_mut() {
            p.value = fetch(&p.name, p.value.shape())?;
        }
        for b in store.buffers_mut() {
            b.value = fetch(&b.name, b.value.shape())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = blobs.len() as u64;
            write_lkt1(t, &mut blobs)?;
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: S::DTYPE.name().to_string(),
                shape: t.shape().to_vec(),
                offset,
                bytes: blobs.len() as u64 - offset,
            });
        }
        let manifest = serde_json::to_vec(&Manifest {
            model: self.model.clone(),
            state: self.state.clone(),
            tensors: entries,
        })?;
        let len = u32::try_from(manifest.len()).map_err(|_| Error::Format("manifest exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(9 + manifest.len() + blobs.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not an LKPT1 checkpoint".into()));
        }
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let body = bytes.get(9..9 + len).ok_or_else(|| Error::Format("truncated checkpoint manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        let blobs = &bytes[9 + len..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let (start, end) = (e.offset as usize, (e.offset + e.bytes) as usize);
            let blob = blobs
                .get(start..end)
                .ok_or_else(|| Error::Format(format!("tensor `{}` lies outside the file", e.name)))?;
            let t: Tensor<S> = read_lkt1(Cursor::new(blob))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!("tensor `{}` disagrees with its manifest shape", e.name)));
            }
            tensors.push((e.name.clone(), t));
        }
        Ok(Checkpoint { model: manifest.model, state: manifest.state, tensors })
    }
}

/// Writes via a temporary sibling file and a rename, so readers never see a partial checkpoint.
pub fn write_checkpoint<S: Scalar>(path: impl AsRef<Path>, ckpt: &Checkpoint<S>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.to_bytes()?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<S>> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
