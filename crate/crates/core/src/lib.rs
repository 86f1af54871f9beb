//! Deterministic CPU toolkit for training word-level lip reading models.
//!
//! The crate covers the whole recipe: a small tensor library with reverse-mode
//! differentiation ([`tensor`], [`nn`]), the recurrent backend
//! ([`recurrent`]), the SE-ResNet frontend and word-boundary input
//! ([`model`]), losses, mixup, Adam and learning-rate schedules ([`recipe`]),
//! video augmentation and a synthetic word dataset ([`data`]), Procrustes face
//! alignment ([`align`]), and training, evaluation and ablation drivers
//! ([`harness`]).

pub mod align;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod nn;
pub mod recipe;
pub mod recurrent;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Rng, Scalar, Tensor};
