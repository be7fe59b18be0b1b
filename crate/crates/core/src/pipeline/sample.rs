use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataops::{read_tensor, write_tensor};
use crate::diffusion::{sample, DiffusionSchedule, SamplerConfig, SamplerKind, CFG_SWEEP};
use crate::model::{Condition, TextCondition};
use crate::reparam::Checkpoint;

use super::{PipelineError, Result, TextEmbeddingProvider};

/// One prompt: either a caption for the text provider or precomputed token
/// embeddings.
#[derive(Clone, Debug)]
pub enum Prompt {
    Text(String),
    Embedding {
        name: String,
        condition: TextCondition,
    },
}

impl Prompt {
    /// Load a `[n_tokens, text_dim]` tensor file; every token is unmasked.
    pub fn from_embedding_file(path: &Path) -> Result<Self> {
        let tokens = read_tensor(path)?;
        let n = tokens.shape().first().copied().unwrap_or(0);
        let condition = TextCondition::new(tokens, vec![true; n])?;
        Ok(Prompt::Embedding {
            name: path.display().to_string(),
            condition,
        })
    }

    fn label(&self) -> &str {
        match self {
            Prompt::Text(t) => t,
            Prompt::Embedding { name, .. } => name,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub prompts: Vec<Prompt>,
    pub seeds: Vec<u64>,
    /// Guidance scales; replaced by the standard sweep when `cfg_sweep` is set.
    pub cfg_scales: Vec<f64>,
    pub cfg_sweep: bool,
    pub kind: SamplerKind,
    pub steps: usize,
    /// Latent height and width.
    pub height: usize,
    pub width: usize,
    pub out_dir: PathBuf,
}

/// Metadata line written next to every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub output: String,
    pub prompt: String,
    pub seed: u64,
    pub cfg_scale: f64,
    pub sampler: SamplerKind,
    pub steps: usize,
    pub height: usize,
    pub width: usize,
    pub variant: String,
    pub checkpoint: String,
}

#[derive(Debug, Default)]
pub struct SampleOutcome {
    pub records: Vec<SampleRecord>,
    pub notices: Vec<String>,
}

pub const SAMPLE_METADATA: &str = "samples.jsonl";

/// Draw one latent per (prompt, seed, cfg) combination into `out_dir`,
/// plus a `samples.jsonl` metadata file.
pub fn sample_cli(
    checkpoint: &Checkpoint,
    request: &SampleRequest,
    text: &dyn TextEmbeddingProvider,
    schedule: &DiffusionSchedule,
) -> Result<SampleOutcome> {
    let variant = checkpoint.config.variant;
    if !variant.is_text_conditioned() {
        return Err(PipelineError::Config(format!(
            "sampling needs a text-conditioned checkpoint, got variant {variant}"
        )));
    }
    let mut outcome = SampleOutcome::default();
    if request.prompts.is_empty() {
        outcome
            .notices
            .push("empty prompt list: nothing to sample".into());
        return Ok(outcome);
    }
    let scales: Vec<f64> = if request.cfg_sweep {
        CFG_SWEEP.to_vec()
    } else {
        request.cfg_scales.clone()
    };
    if scales.is_empty() || request.seeds.is_empty() {
        return Err(PipelineError::Config(
            "at least one seed and one cfg scale are required".into(),
        ));
    }
    let model = checkpoint.to_model()?;
    let cfg = model.config().clone();
    let fingerprint = checkpoint.fingerprint()?;
    let shape = [cfg.latent_channels, request.height, request.width];

    std::fs::create_dir_all(&request.out_dir)?;
    let mut meta = BufWriter::new(File::create(request.out_dir.join(SAMPLE_METADATA))?);
    for (pi, prompt) in request.prompts.iter().enumerate() {
        let condition = match prompt {
            Prompt::Text(caption) => text.embed(caption),
            Prompt::Embedding { condition, .. } => condition.clone(),
        };
        if condition.tokens().shape()[1] != cfg.text_dim {
            return Err(PipelineError::Config(format!(
                "prompt {pi}: embedding width {} does not match model text_dim {}",
                condition.tokens().shape()[1],
                cfg.text_dim
            )));
        }
        let condition = Condition::Text(condition);
        for &seed in &request.seeds {
            for &scale in &scales {
                let sampler = SamplerConfig {
                    kind: request.kind,
                    steps: request.steps,
                    cfg_scale: scale,
                    seed,
                };
                sampler.validate()?;
                let latent = sample(&model, &shape, &condition, &sampler, schedule)?;
                if !latent.is_finite() {
                    return Err(PipelineError::NumericAbort {
                        stage: "sample".into(),
                        step: 0,
                        reason: format!(
                            "non-finite sample for prompt {pi}, seed {seed}, cfg {scale}"
                        ),
                        last_good: None,
                    });
                }
                let name = format!("sample_{:05}.tensor", outcome.records.len());
                write_tensor(&request.out_dir.join(&name), &latent)?;
                let record = SampleRecord {
                    output: name,
                    prompt: prompt.label().to_string(),
                    seed,
                    cfg_scale: scale,
                    sampler: request.kind,
                    steps: request.steps,
                    height: request.height,
                    width: request.width,
                    variant: variant.to_string(),
                    checkpoint: fingerprint.clone(),
                };
                serde_json::to_writer(&mut meta, &record)
                    .map_err(|e| PipelineError::Data(e.to_string()))?;
                meta.write_all(b"\n")?;
                outcome.records.push(record);
            }
        }
    }
    meta.flush()?;
    Ok(outcome)
}
