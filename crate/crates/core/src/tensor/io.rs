//! The `LKT1` tensor file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"LKT1" | dtype: u8 (0 = f32, 1 = f64) | rank: u8 | rank × u32 extents | payload
//! ```
//!
//! The payload is the row-major element buffer in the stored dtype.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) const MAGIC: &[u8; 4] = b"LKT1";

/// Element type code stored in an `LKT1` header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Serializes `t` in its own dtype.
pub fn write_lkt1<S: Scalar, W: Write>(t: &Tensor<S>, mut w: W) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} exceeds 255", t.rank())));
    }
    let mut buf = Vec::with_capacity(6 + 4 * t.rank() + t.len() * S::DTYPE.size());
    buf.extend_from_slice(MAGIC);
    buf.push(S::DTYPE.code());
    buf.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one tensor, converting the stored dtype to `S` if they differ.
pub fn read_lkt1<S: Scalar, R: Read>(mut r: R) -> Result<Tensor<S>> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)
        .map_err(|e| Error::Format(format!("truncated LKT1 header: {e}")))?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad LKT1 magic".into()));
    }
    let dtype = DType::from_code(head[4])?;
    let rank = head[5] as usize;
    let mut dims = vec![0u8; 4 * rank];
    r.read_exact(&mut dims)
        .map_err(|e| Error::Format(format!("truncated LKT1 extents: {e}")))?;
    let shape: Vec<usize> = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * dtype.size()];
    r.read_exact(&mut payload)
        .map_err(|e| Error::Format(format!("truncated LKT1 payload: {e}")))?;
    let data: Vec<S> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| S::of(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| S::of(f64::read_le(c))).collect(),
    };
    Tensor::new(&shape, data)
}

impl<S: Scalar> Tensor<S> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_lkt1(self, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_lkt1(BufReader::new(File::open(path)?))
    }
}
