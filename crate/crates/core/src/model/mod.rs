//! The diffusion transformer: patch embedding, modulated blocks with optional
//! cross-attention, timestep embedder and final layer, in three variants
//! (class-conditional DiT, text-conditioned with per-block adaLN, and
//! text-conditioned with adaLN-single).

mod config;
pub mod embed;
mod modulation;
mod network;
mod params;

pub use config::{ModelConfig, Variant};
pub use modulation::ModulationTuple;
pub use network::{BlockModulation, Bound, Condition, Conditioning, Model, TextCondition};
pub use params::{
    param_count, param_specs, weight_name, InitKind, InitScheme, ParamCount, ParamGroup, ParamSpec,
    WeightName,
};

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("missing weight `{0}`")]
    MissingParam(String),
    #[error("unexpected weight `{0}`")]
    UnexpectedParam(String),
    #[error("weight name `{0}` does not match <module>.<index>.<role>")]
    InvalidName(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[cfg(test)]
mod tests;
