//! Masked multi-objective distillation on a toy Vision Transformer.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors with a reverse-mode tape.
//! - [`masking`]: grid, random, block and evolved patch masks.
//! - [`cluster`]: attention/position distances, average-linkage and GMM-EM clustering.
//! - [`model`]: student encoder/decoder, synthetic teacher, file formats.
//! - [`objectives`]: the patch, CLS and pixel losses and their weighted sum.
//! - [`harness`]: configuration, training, kNN evaluation, sweeps and export.

pub mod cluster;
pub mod error;
pub mod harness;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
