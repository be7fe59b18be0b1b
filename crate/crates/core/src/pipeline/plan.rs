use std::path::PathBuf;

use crate::dataops::LatentCodec;
use crate::model::Variant;
use crate::reparam::Checkpoint;

use super::train::{run_stage, StageContext};
use super::{
    InitFrom, LedgerEntry, PipelineError, PlanConfig, Result, RunLedger, TextEmbeddingProvider,
    PREVIOUS,
};

/// Ledger label of a text-conditioned stage trained from scratch after a
/// class-conditional stage.
pub const NO_REPARAM_LABEL: &str = "w/o re-param";

#[derive(Clone, Copy, Debug, Default)]
pub struct PlanOptions {
    /// Skip stages whose final checkpoint already exists and is complete.
    pub resume: bool,
}

#[derive(Debug, Default)]
pub struct PlanOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub skipped: Vec<usize>,
}

/// Resolve `@previous`, check the init chain and stage constraints, and add
/// the ablation label. Nothing is trained.
pub fn resolve_plan(plan: &PlanConfig) -> Result<PlanConfig> {
    plan.validate()?;
    let mut out = plan.clone();
    for i in 0..out.stages.len() {
        let prev_final = (i > 0).then(|| plan.stage_final(i - 1));
        let name = out.stages[i].name;
        let variant = out.stages[i].variant;
        let broken = |msg: String| Err(PipelineError::Plan(format!("stage {i} ({name}): {msg}")));

        let resolved = match &out.stages[i].init_from {
            InitFrom::Scratch => InitFrom::Scratch,
            InitFrom::Checkpoint(p) | InitFrom::Reparam(p) => {
                let path = if p.as_os_str() == PREVIOUS {
                    match &prev_final {
                        Some(f) => f.clone(),
                        None => return broken(format!("`{PREVIOUS}` used by the first stage")),
                    }
                } else {
                    p.clone()
                };
                match &prev_final {
                    Some(f) if &path != f => {
                        return broken(format!(
                            "init_from {} does not reference the previous stage's output {}",
                            path.display(),
                            f.display()
                        ))
                    }
                    None if !path.exists() => {
                        return broken(format!("init checkpoint {} does not exist", path.display()))
                    }
                    _ => {}
                }
                match out.stages[i].init_from {
                    InitFrom::Reparam(_) => InitFrom::Reparam(path),
                    _ => InitFrom::Checkpoint(path),
                }
            }
        };
        let prev_variant = (i > 0).then(|| plan.stages[i - 1].variant);
        match (&resolved, prev_variant) {
            (InitFrom::Reparam(_), Some(pv)) if pv != Variant::DitClassConditional => {
                return broken(format!(
                    "re-parameterization needs a {} source, previous stage is {pv}",
                    Variant::DitClassConditional
                ))
            }
            (InitFrom::Reparam(_), _) if variant != Variant::T2iAdalnSingle => {
                return broken(format!(
                    "re-parameterization produces {}, stage is {variant}",
                    Variant::T2iAdalnSingle
                ))
            }
            (InitFrom::Checkpoint(_), Some(pv)) if pv != variant => {
                return broken(format!(
                    "checkpoint from a {pv} stage cannot initialize a {variant} stage"
                ))
            }
            _ => {}
        }
        let ablation = matches!(resolved, InitFrom::Scratch)
            && variant.is_text_conditioned()
            && plan.stages[..i]
                .iter()
                .any(|s| s.variant == Variant::DitClassConditional);
        if ablation && out.stages[i].label.is_none() {
            out.stages[i].label = Some(NO_REPARAM_LABEL.into());
        }
        if !out.stages[i].manifest_path.exists() {
            return Err(PipelineError::Data(format!(
                "stage {i} ({name}): manifest {} does not exist",
                out.stages[i].manifest_path.display()
            )));
        }
        out.stages[i].init_from = resolved;
    }
    Ok(out)
}

fn stage_complete(plan: &PlanConfig, index: usize) -> bool {
    let path = plan.stage_final(index);
    Checkpoint::load(&path)
        .map(|ck| {
            ck.metadata.get("step").map(String::as_str)
                == Some(&plan.stages[index].steps.to_string())
                && ck.metadata.get("run_id") == Some(&plan.run_id)
        })
        .unwrap_or(false)
}

/// Run every stage in order, each initialized per its `init_from`.
pub fn run_plan(
    plan: &PlanConfig,
    codec: &dyn LatentCodec,
    text: &dyn TextEmbeddingProvider,
    ledger: &mut RunLedger,
    options: PlanOptions,
) -> Result<PlanOutcome> {
    let plan = resolve_plan(plan)?;
    ledger.push(LedgerEntry::Run {
        run_id: plan.run_id.clone(),
        seed: plan.seed,
        config: serde_json::to_value(&plan).expect("plan serializes"),
    })?;
    let mut outcome = PlanOutcome::default();
    if plan.stages.is_empty() {
        ledger.push(LedgerEntry::Notice {
            message: "empty plan: no stages to run".into(),
        })?;
        return Ok(outcome);
    }
    let schedule = plan.diffusion.build()?;
    for index in 0..plan.stages.len() {
        if options.resume && stage_complete(&plan, index) {
            ledger.push(LedgerEntry::Notice {
                message: format!(
                    "stage {index} ({}) already complete, skipped",
                    plan.stages[index].name
                ),
            })?;
            outcome.skipped.push(index);
            outcome.checkpoints.push(plan.stage_final(index));
            continue;
        }
        let ctx = StageContext {
            plan: &plan,
            stage_index: index,
            schedule: &schedule,
            codec,
            text,
        };
        let done = run_stage(&ctx, ledger, None)?;
        outcome.checkpoints.push(done.final_path);
    }
    Ok(outcome)
}
