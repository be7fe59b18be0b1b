//! Checkpoint container and class-to-text weight surgery.

mod checkpoint;
mod surgery;

pub use checkpoint::{Checkpoint, OptimizerState, FORMAT_VERSION};
pub use surgery::{
    modulation_residual, reparameterize, SurgeryOptions, SurgeryReport, DEFAULT_T_STAR,
};

use thiserror::Error;

use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ReparamError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {supported})")]
    Version { found: u32, supported: u32 },
    #[error("checkpoint truncated: needed {needed} more bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("entry `{name}` declares shape {shape:?} but stores {stored} values")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        stored: usize,
    },
    #[error("checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("surgery: {0}")]
    Surgery(String),
    #[error("surgery: source and target configs differ in {0:?}")]
    ConfigMismatch(Vec<&'static str>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
