//! Three-stage training pipeline: config, optimizer, stage runner, plan
//! orchestration, sampling and auto-labelling.

use std::path::PathBuf;

use crate::dataops::DataError;
use crate::diffusion::DiffusionError;
use crate::model::ModelError;
use crate::reparam::ReparamError;
use crate::tensor::TensorError;

mod autolabel;
mod config;
mod data;
mod desk;
mod ledger;
mod optim;
mod plan;
mod sample;
mod text;
mod train;

pub use autolabel::{
    autolabel, AutoLabelRequest, AutoLabelResponse, AutolabelOptions, AutolabelOutcome,
    MockBehavior, MockScript, MockServer, MockService, RecordingSleeper, Reply, RetryPolicy,
    Sleeper, TcpTransport, ThreadSleeper, Transport, DEFAULT_PROMPT,
};
pub use config::{
    DiffusionSection, InitFrom, PlanConfig, ReparamSection, StageConfig, StageName, PREVIOUS,
};
pub use data::{
    stage_buckets, synth_dataset, synth_pattern, SynthSpec, TrainingSample, TrainingSet,
    SYNTH_CAPTIONS,
};
pub use desk::DeskPlan;
pub use ledger::{LedgerEntry, RunLedger};
pub use optim::AdamW;
pub use plan::{resolve_plan, run_plan, PlanOptions, PlanOutcome, NO_REPARAM_LABEL};
pub use sample::{sample_cli, Prompt, SampleOutcome, SampleRecord, SampleRequest, SAMPLE_METADATA};
pub use text::{HashingTextStub, TextEmbeddingProvider};
pub use train::{initial_model, run_stage, StageContext, StageOutcome};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("plan error: {0}")]
    Plan(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric abort in stage {stage} at step {step}: {reason}")]
    NumericAbort {
        stage: String,
        step: u64,
        reason: String,
        last_good: Option<PathBuf>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reparam(#[from] ReparamError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl From<DataError> for PipelineError {
    fn from(e: DataError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl PipelineError {
    /// Process exit code: 2 for config or plan errors, 3 for data errors
    /// (including unreadable files and corrupt checkpoints), 4 for numeric
    /// aborts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Plan(_) => 2,
            PipelineError::Reparam(ReparamError::Surgery(_) | ReparamError::ConfigMismatch(_)) => 2,
            PipelineError::Data(_) | PipelineError::Io(_) | PipelineError::Reparam(_) => 3,
            PipelineError::NumericAbort { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
