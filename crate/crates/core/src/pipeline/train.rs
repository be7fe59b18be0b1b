use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::dataops::{batch_scheduler, BatchSchedule, LatentCodec};
use crate::diffusion::{training_loss, DiffusionSchedule};
use crate::model::{Condition, InitScheme, Model, ModelConfig, Variant};
use crate::reparam::{reparameterize, Checkpoint, OptimizerState, SurgeryOptions};
use crate::tensor::{Graph, SeededRng, TensorError};

use super::data::{stage_buckets, TrainingSet};
use super::{
    AdamW, InitFrom, LedgerEntry, PipelineError, PlanConfig, Result, RunLedger, StageConfig,
    TextEmbeddingProvider, PREVIOUS,
};

/// Everything a stage needs besides its own config.
pub struct StageContext<'a> {
    pub plan: &'a PlanConfig,
    pub stage_index: usize,
    pub schedule: &'a DiffusionSchedule,
    pub codec: &'a dyn LatentCodec,
    pub text: &'a dyn TextEmbeddingProvider,
}

impl StageContext<'_> {
    pub fn stage(&self) -> &StageConfig {
        &self.plan.stages[self.stage_index]
    }

    pub fn stage_seed(&self) -> u64 {
        self.plan.seed.wrapping_add(self.stage_index as u64)
    }
}

#[derive(Debug)]
pub struct StageOutcome {
    pub final_path: PathBuf,
    pub checkpoint: Checkpoint,
    pub steps_run: u64,
    pub losses: Vec<f64>,
}

/// Build the starting weights described by `init_from`.
pub fn initial_model(ctx: &StageContext<'_>) -> Result<Model> {
    let stage = ctx.stage();
    let config = ctx.plan.model_for(stage);
    let check_path = |p: &Path| -> Result<()> {
        if p.as_os_str() == PREVIOUS {
            return Err(PipelineError::Plan(format!(
                "stage {}: `{PREVIOUS}` must be resolved by the plan runner",
                stage.name
            )));
        }
        Ok(())
    };
    match &stage.init_from {
        InitFrom::Scratch => Ok(Model::new(config, InitScheme::Standard, ctx.stage_seed())?),
        InitFrom::Checkpoint(p) => {
            check_path(p)?;
            let ck = Checkpoint::load(p)?;
            if ck.config != config {
                return Err(PipelineError::Config(format!(
                    "stage {}: checkpoint {} has config {:?} but the stage expects {:?}",
                    stage.name,
                    p.display(),
                    ck.config,
                    config
                )));
            }
            Ok(ck.to_model()?)
        }
        InitFrom::Reparam(p) => {
            check_path(p)?;
            if stage.variant != Variant::T2iAdalnSingle {
                return Err(PipelineError::Config(format!(
                    "stage {}: re-parameterized init needs variant {}",
                    stage.name,
                    Variant::T2iAdalnSingle
                )));
            }
            let source = Checkpoint::load(p)?;
            let options = SurgeryOptions {
                t_star: ctx.plan.reparam.t_star,
                seed: ctx.plan.reparam.seed,
                target: Some(config),
            };
            let (ck, report) = reparameterize(&source, &options)?;
            log::info!(
                "stage {}: surgery from {} (residual {:.3e})",
                stage.name,
                p.display(),
                report.max_modulation_residual
            );
            Ok(ck.to_model()?)
        }
    }
}

fn condition_for(
    model: &ModelConfig,
    text: &dyn TextEmbeddingProvider,
    caption: &str,
    label: Option<usize>,
) -> Result<Condition> {
    match model.variant {
        Variant::DitClassConditional => Ok(Condition::Class(label)),
        _ => {
            if text.text_dim() != model.text_dim {
                return Err(PipelineError::Config(format!(
                    "text provider width {} does not match model text_dim {}",
                    text.text_dim(),
                    model.text_dim
                )));
            }
            Ok(Condition::Text(text.embed(caption)))
        }
    }
}

fn stage_checkpoint(
    ctx: &StageContext<'_>,
    model: &Model,
    opt: &OptimizerState,
    step: u64,
) -> Checkpoint {
    let stage = ctx.stage();
    let mut ck = Checkpoint::from_model(model)
        .with_metadata("run_id", &ctx.plan.run_id)
        .with_metadata("stage", stage.name)
        .with_metadata("stage_index", ctx.stage_index)
        .with_metadata("step", step)
        .with_metadata("seed", ctx.stage_seed())
        .with_metadata("init_from", &stage.init_from);
    if let Some(label) = &stage.label {
        ck = ck.with_metadata("label", label);
    }
    ck.optimizer = Some(opt.clone());
    ck
}

/// Train one stage. With `resume`, continue from a mid-stage checkpoint of
/// the same stage (weights, optimizer moments and step counter restored).
pub fn run_stage(
    ctx: &StageContext<'_>,
    ledger: &mut RunLedger,
    resume: Option<&Path>,
) -> Result<StageOutcome> {
    let stage = ctx.stage();
    stage.validate()?;
    let model_cfg = ctx.plan.model_for(stage);
    let buckets = stage_buckets(stage, &model_cfg, ctx.codec.downsample())?;
    let data = TrainingSet::load(&stage.manifest_path, buckets, &model_cfg, ctx.codec)?;
    let conditions = data
        .samples
        .iter()
        .map(|s| condition_for(&model_cfg, ctx.text, &s.caption, s.class_label))
        .collect::<Result<Vec<_>>>()?;

    let (mut model, mut opt_state, start) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let meta = |k: &str| ck.metadata.get(k).cloned().unwrap_or_default();
            if meta("stage_index") != ctx.stage_index.to_string()
                || meta("run_id") != ctx.plan.run_id
            {
                return Err(PipelineError::Config(format!(
                    "{} does not belong to stage {} of run {}",
                    path.display(),
                    ctx.stage_index,
                    ctx.plan.run_id
                )));
            }
            let step: u64 = meta("step").parse().map_err(|_| {
                PipelineError::Config(format!("{}: missing step metadata", path.display()))
            })?;
            let opt = ck.optimizer.clone().ok_or_else(|| {
                PipelineError::Config(format!("{}: no optimizer state to resume", path.display()))
            })?;
            (ck.to_model()?, opt, step)
        }
        None => {
            let model = initial_model(ctx)?;
            let opt = AdamW::init_state(model.params());
            (model, opt, 0)
        }
    };
    if model.config() != &model_cfg {
        return Err(PipelineError::Config(format!(
            "stage {}: initial weights do not match the model config",
            stage.name
        )));
    }

    ledger.push(LedgerEntry::StageStart {
        stage_index: ctx.stage_index,
        stage: stage.name.to_string(),
        init_from: stage.init_from.to_string(),
        label: stage.label.clone(),
        resumed_at: start,
        seed: ctx.stage_seed(),
    })?;

    let dir = ctx.plan.stage_dir(ctx.stage_index);
    std::fs::create_dir_all(&dir)?;
    let optimizer = AdamW::new(stage.lr, stage.weight_decay, stage.grad_clip);
    let seed = ctx.stage_seed();
    let epoch_plan = |epoch: u64| -> Result<BatchSchedule> {
        batch_scheduler(&data.manifest, &data.buckets, stage.batch_size, seed, epoch)
            .map_err(|e| PipelineError::Data(format!("stage {}: {e}", stage.name)))
    };
    let mut epoch_cache: Option<(u64, BatchSchedule)> = None;
    let per_epoch = epoch_plan(0)?.batches.len() as u64;
    let mut last_good: Option<PathBuf> = resume
        .map(Path::to_path_buf)
        .or_else(|| stage.init_from.path().map(Path::to_path_buf));
    let mut losses = Vec::new();

    for step in start..stage.steps as u64 {
        let started = Instant::now();
        let (epoch, index) = if stage.overfit {
            (0, 0)
        } else {
            (step / per_epoch, step % per_epoch)
        };
        if epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            epoch_cache = Some((epoch, epoch_plan(epoch)?));
        }
        let batch = epoch_cache.as_ref().expect("cached").1.batches[index as usize].clone();
        let mut rng = SeededRng::new(seed, if stage.overfit { 1 } else { step + 1 });

        let abort = |ledger: &mut RunLedger,
                     reason: String,
                     last_good: &Option<PathBuf>|
         -> Result<StageOutcome> {
            ledger.push(LedgerEntry::Abort {
                stage_index: ctx.stage_index,
                step,
                reason: reason.clone(),
                last_good: last_good.clone(),
            })?;
            Err(PipelineError::NumericAbort {
                stage: stage.name.to_string(),
                step,
                reason,
                last_good: last_good.clone(),
            })
        };

        let evaluated: std::result::Result<
            (f64, BTreeMap<String, crate::tensor::Tensor>),
            PipelineError,
        > = (|| {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let mut total = None;
            for &i in &batch.indices {
                let (l, _) = training_loss(
                    &mut g,
                    &bound,
                    &data.samples[i].latent,
                    &conditions[i],
                    &mut rng,
                    ctx.schedule,
                )?;
                total = Some(match total {
                    None => l,
                    Some(acc) => g.add(acc, l)?,
                });
            }
            let loss = g.scale(
                total.expect("non-empty batch"),
                1.0 / batch.indices.len() as f64,
            )?;
            g.backward(loss)?;
            Ok((g.value(loss).item(), bound.grads(&g)))
        })();
        let (loss, grads) = match evaluated {
            Ok(v) => v,
            Err(e) if e.is_non_finite() => return abort(ledger, e.to_string(), &last_good),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
            return abort(
                ledger,
                format!("non-finite loss or gradient ({loss})"),
                &last_good,
            );
        }

        let grad_norm = optimizer.step(model.params_mut(), &grads, &mut opt_state);
        if model.params().values().any(|p| !p.is_finite()) {
            return abort(ledger, "non-finite weights after update".into(), &last_good);
        }
        losses.push(loss);
        let done = step + 1;
        ledger.push(LedgerEntry::Step {
            stage_index: ctx.stage_index,
            step: done,
            loss,
            lr: stage.lr,
            bucket_id: batch.bucket_id,
            grad_norm,
            clipped: grad_norm > stage.grad_clip,
            wall_ms: started.elapsed().as_millis() as u64,
        })?;

        let every = ctx.plan.checkpoint_every as u64;
        if every > 0 && done % every == 0 && done < stage.steps as u64 {
            let path = dir.join(format!("step_{done:06}.ckpt"));
            stage_checkpoint(ctx, &model, &opt_state, done).save(&path)?;
            ledger.push(LedgerEntry::Checkpoint {
                stage_index: ctx.stage_index,
                step: done,
                path: path.clone(),
            })?;
            last_good = Some(path);
        }
    }

    let steps = stage.steps as u64;
    let final_path = ctx.plan.stage_final(ctx.stage_index);
    let checkpoint = stage_checkpoint(ctx, &model, &opt_state, steps);
    checkpoint.save(&final_path)?;
    ledger.push(LedgerEntry::Checkpoint {
        stage_index: ctx.stage_index,
        step: steps,
        path: final_path.clone(),
    })?;
    ledger.push(LedgerEntry::StageEnd {
        stage_index: ctx.stage_index,
        steps,
        checkpoint: final_path.clone(),
    })?;
    Ok(StageOutcome {
        final_path,
        checkpoint,
        steps_run: steps - start,
        losses,
    })
}

impl PipelineError {
    fn is_non_finite(&self) -> bool {
        matches!(
            self,
            PipelineError::Tensor(TensorError::NonFinite { .. })
                | PipelineError::Model(crate::model::ModelError::Tensor(
                    TensorError::NonFinite { .. }
                ))
                | PipelineError::Diffusion(crate::diffusion::DiffusionError::Tensor(
                    TensorError::NonFinite { .. }
                ))
                | PipelineError::Diffusion(crate::diffusion::DiffusionError::Model(
                    crate::model::ModelError::Tensor(TensorError::NonFinite { .. })
                ))
        )
    }
}
