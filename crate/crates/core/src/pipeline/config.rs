//! Run configuration: a plan of stages plus shared model/diffusion settings,
//! loaded from layered TOML (built-in defaults < file < `key=value` overrides).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionSchedule, ScheduleKind};
use crate::model::{ModelConfig, Variant};
use crate::reparam::DEFAULT_T_STAR;

use super::{PipelineError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    PixelDependency,
    TextImageAlign,
    HighAesthetics,
}

impl StageName {
    pub fn as_str(self) -> &'static str {
        match self {
            StageName::PixelDependency => "pixel_dependency",
            StageName::TextImageAlign => "text_image_align",
            StageName::HighAesthetics => "high_aesthetics",
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Path token naming the previous stage's final checkpoint.
pub const PREVIOUS: &str = "@previous";

/// Where a stage's weights come from. Written as `scratch`,
/// `checkpoint:<path>` or `reparam:<path>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum InitFrom {
    Scratch,
    Checkpoint(PathBuf),
    Reparam(PathBuf),
}

impl InitFrom {
    pub fn path(&self) -> Option<&Path> {
        match self {
            InitFrom::Scratch => None,
            InitFrom::Checkpoint(p) | InitFrom::Reparam(p) => Some(p),
        }
    }
}

impl FromStr for InitFrom {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "scratch" {
            return Ok(InitFrom::Scratch);
        }
        match s.split_once(':') {
            Some(("checkpoint", p)) if !p.is_empty() => Ok(InitFrom::Checkpoint(p.into())),
            Some(("reparam", p)) if !p.is_empty() => Ok(InitFrom::Reparam(p.into())),
            _ => Err(PipelineError::Config(format!(
                "init_from `{s}`: expected scratch, checkpoint:<path> or reparam:<path>"
            ))),
        }
    }
}

impl TryFrom<String> for InitFrom {
    type Error = PipelineError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<InitFrom> for String {
    fn from(i: InitFrom) -> String {
        i.to_string()
    }
}

impl fmt::Display for InitFrom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitFrom::Scratch => f.write_str("scratch"),
            InitFrom::Checkpoint(p) => write!(f, "checkpoint:{}", p.display()),
            InitFrom::Reparam(p) => write!(f, "reparam:{}", p.display()),
        }
    }
}

fn default_lr() -> f64 {
    2e-5
}
fn default_wd() -> f64 {
    0.03
}
fn default_clip() -> f64 {
    1.0
}
fn default_variant() -> Variant {
    Variant::T2iAdalnSingle
}
fn default_bucket_count() -> usize {
    3
}
fn default_ratio_min() -> f64 {
    0.5
}
fn default_ratio_max() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: StageName,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    /// Square training resolution in pixels; the target area when
    /// `multi_aspect` is set.
    pub resolution: usize,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub multi_aspect: bool,
    #[serde(default = "default_bucket_count")]
    pub bucket_count: usize,
    #[serde(default = "default_ratio_min")]
    pub bucket_ratio_min: f64,
    #[serde(default = "default_ratio_max")]
    pub bucket_ratio_max: f64,
    pub manifest_path: PathBuf,
    pub init_from: InitFrom,
    /// Train on one repeated batch with frozen timestep/noise draws.
    #[serde(default)]
    pub overfit: bool,
    /// Free-form tag copied into the ledger.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(format!("stage {}: {m}", self.name)));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip > 0.0) {
            return bad("weight_decay must be ≥ 0 and grad_clip > 0".into());
        }
        if self.multi_aspect && self.name != StageName::HighAesthetics {
            return bad("multi_aspect is only allowed in the high_aesthetics stage".into());
        }
        if self.resolution == 0 {
            return bad("resolution must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    pub steps: usize,
    pub schedule: ScheduleKind,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            steps: crate::diffusion::DEFAULT_STEPS,
            schedule: ScheduleKind::default(),
        }
    }
}

impl DiffusionSection {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(self.schedule, self.steps)
            .map_err(|e| PipelineError::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReparamSection {
    pub t_star: f64,
    pub seed: u64,
}

impl Default for ReparamSection {
    fn default() -> Self {
        Self {
            t_star: DEFAULT_T_STAR,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub run_id: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Save an intermediate checkpoint every k steps (0: final only).
    pub checkpoint_every: usize,
    /// Latent codec downsample factor; bucket sizes are multiples of
    /// `patch_size × codec_downsample` pixels.
    pub codec_downsample: usize,
    pub model: ModelConfig,
    pub diffusion: DiffusionSection,
    pub reparam: ReparamSection,
    #[serde(default, rename = "stage")]
    pub stages: Vec<StageConfig>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            seed: 0,
            out_dir: "runs".into(),
            checkpoint_every: 0,
            codec_downsample: 8,
            model: ModelConfig::desk(Variant::T2iAdalnSingle),
            diffusion: DiffusionSection::default(),
            reparam: ReparamSection::default(),
            stages: Vec::new(),
        }
    }
}

impl PlanConfig {
    /// Defaults, then `file` (relative paths resolved against its directory),
    /// then `key=value` overrides with dotted keys (`stage.1.lr=1e-4`).
    pub fn load_layered(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(PlanConfig::default())
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let mut base_dir = None;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
            let layer: toml::Table = toml::from_str(&text)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, toml::Value::Table(layer));
            base_dir = path.parent().map(Path::to_path_buf);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut config: PlanConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        if let Some(dir) = base_dir.filter(|d| !d.as_os_str().is_empty()) {
            config.resolve_paths(&dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut value = toml::Value::try_from(PlanConfig::default())
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let layer: toml::Table =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        merge(&mut value, toml::Value::Table(layer));
        let config: PlanConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan config serializes")
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && p.as_os_str() != PREVIOUS {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        for s in &mut self.stages {
            fix(&mut s.manifest_path);
            match &mut s.init_from {
                InitFrom::Scratch => {}
                InitFrom::Checkpoint(p) | InitFrom::Reparam(p) => fix(p),
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| PipelineError::Config(format!("model: {e}")))?;
        if self.codec_downsample == 0 {
            return Err(PipelineError::Config(
                "codec_downsample must be positive".into(),
            ));
        }
        self.diffusion.build()?;
        for s in &self.stages {
            s.validate()?;
        }
        Ok(())
    }

    pub fn model_for(&self, stage: &StageConfig) -> ModelConfig {
        self.model.with_variant(stage.variant)
    }

    pub fn stage_dir(&self, index: usize) -> PathBuf {
        self.out_dir
            .join(format!("{index}-{}", self.stages[index].name))
    }

    pub fn stage_final(&self, index: usize) -> PathBuf {
        self.stage_dir(index).join("final.ckpt")
    }
}

fn merge(base: &mut toml::Value, layer: toml::Value) {
    match (base, layer) {
        (toml::Value::Table(b), toml::Value::Table(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, l) => *b = l,
    }
}

fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("override `{spec}` is not key=value")))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            toml::Value::Table(t) => {
                if last {
                    t.insert(part.to_string(), value);
                    return Ok(());
                }
                t.entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            toml::Value::Array(a) => {
                let idx: usize = part.parse().map_err(|_| {
                    PipelineError::Config(format!("override `{key}`: `{part}` is not an index"))
                })?;
                let len = a.len();
                let slot = a.get_mut(idx).ok_or_else(|| {
                    PipelineError::Config(format!(
                        "override `{key}`: index {idx} out of range ({len})"
                    ))
                })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(PipelineError::Config(format!(
                    "override `{key}`: `{part}` is not a table"
                )))
            }
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const PLAN: &str = r#"
run_id = "t"
[model]
depth = 2
[[stage]]
name = "pixel_dependency"
variant = "dit_class_conditional"
resolution = 64
steps = 10
batch_size = 4
manifest_path = "data/a.jsonl"
init_from = "scratch"
[[stage]]
name = "text_image_align"
resolution = 64
steps = 10
batch_size = 4
manifest_path = "data/a.jsonl"
init_from = "reparam:@previous"
"#;

    #[test]
    fn layering_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plan.toml");
        std::fs::write(&path, PLAN).unwrap();
        let c = PlanConfig::load_layered(Some(&path), &["stage.1.lr=1e-3".into(), "seed=7".into()])
            .unwrap();
        assert_eq!(c.model.depth, 2);
        assert_eq!(
            c.model.hidden_size, 64,
            "untouched defaults survive a partial table"
        );
        assert_eq!(c.seed, 7);
        assert_eq!(c.stages[0].lr, 2e-5);
        assert_eq!(c.stages[0].weight_decay, 0.03);
        assert_eq!(c.stages[1].lr, 1e-3);
        assert_eq!(c.stages[1].init_from, InitFrom::Reparam(PREVIOUS.into()));
        assert_eq!(c.stages[0].manifest_path, dir.path().join("data/a.jsonl"));
        let again = PlanConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn multi_aspect_is_restricted() {
        let text = PLAN.replacen(
            "init_from = \"scratch\"",
            "init_from = \"scratch\"\nmulti_aspect = true",
            1,
        );
        let err = PlanConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("high_aesthetics"), "{err}");
    }

    #[test]
    fn bad_values_are_config_errors() {
        assert!(PlanConfig::from_toml_str(&PLAN.replace("steps = 10", "steps = 0")).is_err());
        assert!(PlanConfig::from_toml_str(&PLAN.replace("\"scratch\"", "\"nowhere\"")).is_err());
        assert!(PlanConfig::from_toml_str(&format!("{PLAN}\nbogus = 1")).is_err());
        assert!(PlanConfig::load_layered(None, &["model.depth".into()]).is_err());
        assert!(matches!(
            PlanConfig::from_toml_str("seed = \"x\""),
            Err(PipelineError::Config(_))
        ));
    }

    #[test]
    fn init_from_round_trips() {
        for s in ["scratch", "checkpoint:a/b.ckpt", "reparam:@previous"] {
            assert_eq!(s.parse::<InitFrom>().unwrap().to_string(), s);
        }
    }
}
