//! Noise schedules, the ε-prediction objective, and samplers.

mod loss;
mod oracle;
mod sampler;
mod schedule;

pub use loss::{training_loss, training_loss_with, LossDraw, COND_DROPOUT};
pub use oracle::AnalyticGaussian;
pub use sampler::{
    classifier_free_guidance, dpm_solver_2_sample, dpm_solver_grid, iddpm_ancestral_sample,
    iddpm_timesteps, sample, Denoiser, SamplerConfig, SamplerKind, CFG_SWEEP, IDDPM_DEFAULT_STEPS,
};
pub use schedule::{q_sample, DiffusionSchedule, ScheduleKind, DEFAULT_STEPS};

use thiserror::Error;

use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("config: {0}")]
    Config(String),
    #[error("timestep {t} out of range for a {steps}-step schedule")]
    Timestep { t: usize, steps: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DiffusionError> = std::result::Result<T, E>;
