//! Class-conditional DiT → adaLN-single text-to-image surgery.
//!
//! The shared projection `f` is taken from block 0's adaLN MLP. Each block's
//! offset is `E⁽ⁱ⁾ = f⁽ⁱ⁾(e) − f(e)` with `e` the source time embedding at
//! `t*`, so the converted model reproduces every block's modulation exactly
//! at `t*` when no class is given. The final layer gets the same treatment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{weight_name, Condition, InitScheme, Model, ModelConfig, Variant, WeightName};
use crate::tensor::Tensor;

use super::{Checkpoint, ReparamError};

pub const DEFAULT_T_STAR: f64 = 500.0;

#[derive(Clone, Debug)]
pub struct SurgeryOptions {
    pub t_star: f64,
    /// Seed for freshly initialized weights (cross-attention, caption path).
    pub seed: u64,
    /// Explicit target; defaults to the source config switched to adaLN-single.
    pub target: Option<ModelConfig>,
}

impl Default for SurgeryOptions {
    fn default() -> Self {
        Self {
            t_star: DEFAULT_T_STAR,
            seed: 0,
            target: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurgeryReport {
    pub t_star: f64,
    pub seed: u64,
    pub copied: Vec<String>,
    pub zero_initialized: Vec<String>,
    pub freshly_initialized: Vec<String>,
    pub derived: Vec<String>,
    /// `max_i ‖S_target⁽ⁱ⁾(t*) − S_source⁽ⁱ⁾(t*)‖∞`.
    pub max_modulation_residual: f64,
    pub final_modulation_residual: f64,
}

impl SurgeryReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Convert a class-conditional checkpoint into an adaLN-single one.
pub fn reparameterize(
    source: &Checkpoint,
    options: &SurgeryOptions,
) -> Result<(Checkpoint, SurgeryReport), ReparamError> {
    let src_cfg = &source.config;
    if src_cfg.variant != Variant::DitClassConditional {
        return Err(ReparamError::Surgery(format!(
            "source must be {}, got {}",
            Variant::DitClassConditional,
            src_cfg.variant
        )));
    }
    let target_cfg = match &options.target {
        Some(t) => {
            if t.variant != Variant::T2iAdalnSingle {
                return Err(ReparamError::Surgery(format!(
                    "target must be {}, got {}",
                    Variant::T2iAdalnSingle,
                    t.variant
                )));
            }
            t.clone()
        }
        None => src_cfg.with_variant(Variant::T2iAdalnSingle),
    };
    let mismatches = src_cfg.surgery_mismatches(&target_cfg);
    if !mismatches.is_empty() {
        return Err(ReparamError::ConfigMismatch(mismatches));
    }
    if !options.t_star.is_finite() {
        return Err(ReparamError::Surgery("t* must be finite".into()));
    }

    let src = source.to_model()?;
    let h = src_cfg.hidden_size;
    let null = Condition::Class(None);
    let src_blocks = src.block_modulations(options.t_star, &null)?;
    let src_final = src.final_modulation(options.t_star, &null)?;
    let e = time_embedding(&src, options.t_star)?;

    let fresh = Model::new(target_cfg.clone(), InitScheme::Standard, options.seed)?;
    let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut report = SurgeryReport {
        t_star: options.t_star,
        seed: options.seed,
        copied: Vec::new(),
        zero_initialized: Vec::new(),
        freshly_initialized: Vec::new(),
        derived: Vec::new(),
        max_modulation_residual: 0.0,
        final_modulation_residual: 0.0,
    };

    let global_pack = src_blocks[0].pack();
    for (name, fresh_value) in fresh.params() {
        let parsed = WeightName::parse(name)?;
        let value = match (parsed.module, parsed.role) {
            ("t_block", "mod_w") | ("t_block", "mod_b") => {
                let from = weight_name(
                    "blocks",
                    0,
                    if parsed.role == "mod_w" {
                        "adaln_w"
                    } else {
                        "adaln_b"
                    },
                );
                report.derived.push(name.clone());
                src.param(&from).expect("validated source").clone()
            }
            ("blocks", "mod_table") => {
                let own = src_blocks[parsed.index].pack();
                let offset: Vec<f64> = own.iter().zip(&global_pack).map(|(a, b)| a - b).collect();
                report.derived.push(name.clone());
                Tensor::new(&[6 * h], offset)?
            }
            ("final", "mod_table") => {
                let table: Vec<f64> = src_final
                    .iter()
                    .enumerate()
                    .map(|(k, v)| v - e[k % h])
                    .collect();
                report.derived.push(name.clone());
                Tensor::new(&[2 * h], table)?
            }
            ("blocks", r) if r.starts_with("cross_out") => {
                report.zero_initialized.push(name.clone());
                Tensor::zeros(fresh_value.shape())
            }
            ("blocks", r) if r.starts_with("cross_") => {
                report.freshly_initialized.push(name.clone());
                fresh_value.clone()
            }
            ("caption", _) => {
                report.freshly_initialized.push(name.clone());
                fresh_value.clone()
            }
            _ => match src.param(name) {
                Some(v) if v.shape() == fresh_value.shape() => {
                    report.copied.push(name.clone());
                    v.clone()
                }
                Some(v) => {
                    return Err(ReparamError::Surgery(format!(
                        "`{name}` has shape {:?} in the source but {:?} in the target",
                        v.shape(),
                        fresh_value.shape()
                    )))
                }
                None => {
                    return Err(ReparamError::Surgery(format!(
                        "source has no weight `{name}`"
                    )))
                }
            },
        };
        params.insert(name.clone(), value);
    }

    let target = Model::from_params(target_cfg, params)?;
    let residuals = modulation_residual(&src, &target, options.t_star)?;
    report.max_modulation_residual = residuals.iter().copied().fold(0.0, f64::max);
    let tgt_final =
        target.final_modulation(options.t_star, &Condition::null_for(target.config()))?;
    report.final_modulation_residual = tgt_final
        .iter()
        .zip(&src_final)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let mut out = Checkpoint::from_model(&target)
        .with_metadata("surgery.t_star", options.t_star)
        .with_metadata("surgery.seed", options.seed);
    if let Ok(fp) = source.fingerprint() {
        out = out.with_metadata("surgery.source", fp);
    }
    Ok((out, report))
}

/// Per-block `‖S_a⁽ⁱ⁾(t) − S_b⁽ⁱ⁾(t)‖∞`, each model under its null condition.
pub fn modulation_residual(a: &Model, b: &Model, t: f64) -> Result<Vec<f64>, ReparamError> {
    if a.config().depth != b.config().depth || a.config().hidden_size != b.config().hidden_size {
        return Err(ReparamError::ConfigMismatch(
            a.config().surgery_mismatches(b.config()),
        ));
    }
    let ma = a.block_modulations(t, &Condition::null_for(a.config()))?;
    let mb = b.block_modulations(t, &Condition::null_for(b.config()))?;
    Ok(ma.iter().zip(&mb).map(|(x, y)| x.max_abs_diff(y)).collect())
}

fn time_embedding(model: &Model, t: f64) -> Result<Vec<f64>, ReparamError> {
    let mut g = crate::tensor::Graph::new();
    let bound = model.bind(&mut g, false);
    let e = bound.time_embedding(&mut g, t)?;
    Ok(g.value(e).data().to_vec())
}
