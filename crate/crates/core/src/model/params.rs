//! Weight inventory: names, shapes, parameter groups, initialization.
//!
//! Names follow `<module>.<block_index>.<role>`; modules without repetition
//! use index 0. `module` and `role` are `[a-z0-9_]+`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{SeededRng, Tensor};

use super::{ModelConfig, ModelError, Variant};

/// A parsed weight name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightName<'a> {
    pub module: &'a str,
    pub index: usize,
    pub role: &'a str,
}

impl<'a> WeightName<'a> {
    pub fn parse(name: &'a str) -> Result<Self, ModelError> {
        let bad = || ModelError::InvalidName(name.to_string());
        let mut parts = name.split('.');
        let (Some(module), Some(index), Some(role), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        let ident = |s: &str| {
            !s.is_empty()
                && s.bytes()
                    .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
        };
        if !ident(module)
            || !ident(role)
            || index.is_empty()
            || !index.bytes().all(|b| b.is_ascii_digit())
        {
            return Err(bad());
        }
        if index.len() > 1 && index.starts_with('0') {
            return Err(bad());
        }
        let index = index.parse().map_err(|_| bad())?;
        Ok(Self {
            module,
            index,
            role,
        })
    }
}

pub fn weight_name(module: &str, index: usize, role: &str) -> String {
    format!("{module}.{index}.{role}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    PatchEmbed,
    TimeEmbedder,
    ClassEmbedder,
    CaptionEmbedder,
    SelfAttention,
    CrossAttention,
    Mlp,
    /// Block modulation: per-block adaLN MLPs, or the shared MLP plus the
    /// per-block offset table.
    Adaln,
    FinalLayer,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::PatchEmbed => "patch_embed",
            ParamGroup::TimeEmbedder => "time_embedder",
            ParamGroup::ClassEmbedder => "class_embedder",
            ParamGroup::CaptionEmbedder => "caption_embedder",
            ParamGroup::SelfAttention => "self_attention",
            ParamGroup::CrossAttention => "cross_attention",
            ParamGroup::Mlp => "mlp",
            ParamGroup::Adaln => "adaln",
            ParamGroup::FinalLayer => "final_layer",
        }
    }
}

/// How a weight is drawn at construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitKind {
    Zero,
    Xavier,
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub init: InitKind,
}

impl ParamSpec {
    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }
}

struct SpecBuilder(Vec<ParamSpec>);

impl SpecBuilder {
    fn push(
        &mut self,
        module: &str,
        index: usize,
        role: &str,
        shape: &[usize],
        group: ParamGroup,
        init: InitKind,
    ) {
        self.0.push(ParamSpec {
            name: weight_name(module, index, role),
            shape: shape.to_vec(),
            group,
            init,
        });
    }

    /// `<prefix>_w [din×dout]` and `<prefix>_b [dout]`.
    #[allow(clippy::too_many_arguments)]
    fn linear(
        &mut self,
        module: &str,
        index: usize,
        prefix: &str,
        din: usize,
        dout: usize,
        group: ParamGroup,
        init: InitKind,
    ) {
        self.push(
            module,
            index,
            &format!("{prefix}_w"),
            &[din, dout],
            group,
            init,
        );
        self.push(
            module,
            index,
            &format!("{prefix}_b"),
            &[dout],
            group,
            InitKind::Zero,
        );
    }
}

/// Every weight of a model with this configuration, in construction order.
/// Metadata only; nothing is allocated.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    use InitKind::*;
    use ParamGroup::*;
    let h = config.hidden_size;
    let mut b = SpecBuilder(Vec::new());

    b.linear(
        "patch_embed",
        0,
        "proj",
        config.patch_dim(),
        h,
        PatchEmbed,
        Xavier,
    );
    b.linear(
        "t_embedder",
        0,
        "fc1",
        config.time_embed_freq_dim,
        h,
        TimeEmbedder,
        Normal(0.02),
    );
    b.linear("t_embedder", 0, "fc2", h, h, TimeEmbedder, Normal(0.02));

    match config.variant {
        Variant::DitClassConditional => {
            b.push(
                "y_embedder",
                0,
                "table",
                &[config.num_classes, h],
                ClassEmbedder,
                Normal(0.02),
            );
        }
        Variant::T2iAdalnPerBlock | Variant::T2iAdalnSingle => {
            b.linear(
                "caption",
                0,
                "fc1",
                config.text_dim,
                h,
                CaptionEmbedder,
                Xavier,
            );
            b.linear("caption", 0, "fc2", h, h, CaptionEmbedder, Xavier);
            let std = 1.0 / (config.text_dim as f64).sqrt();
            b.push(
                "caption",
                0,
                "null_token",
                &[1, config.text_dim],
                CaptionEmbedder,
                Normal(std),
            );
        }
    }
    if config.variant == Variant::T2iAdalnSingle {
        b.linear("t_block", 0, "mod", h, 6 * h, Adaln, Normal(0.02));
    }

    for i in 0..config.depth {
        b.linear("blocks", i, "attn_qkv", h, 3 * h, SelfAttention, Xavier);
        b.linear("blocks", i, "attn_out", h, h, SelfAttention, Xavier);
        if config.variant.is_text_conditioned() {
            b.linear("blocks", i, "cross_q", h, h, CrossAttention, Xavier);
            b.linear("blocks", i, "cross_kv", h, 2 * h, CrossAttention, Xavier);
            b.linear("blocks", i, "cross_out", h, h, CrossAttention, Zero);
        }
        b.linear("blocks", i, "mlp_fc1", h, config.mlp_hidden(), Mlp, Xavier);
        b.linear("blocks", i, "mlp_fc2", config.mlp_hidden(), h, Mlp, Xavier);
        match config.variant {
            Variant::T2iAdalnSingle => {
                let std = 1.0 / (h as f64).sqrt();
                b.push("blocks", i, "mod_table", &[6 * h], Adaln, Normal(std));
            }
            _ => b.linear("blocks", i, "adaln", h, 6 * h, Adaln, Zero),
        }
    }

    match config.variant {
        Variant::T2iAdalnSingle => {
            let std = 1.0 / (h as f64).sqrt();
            b.push("final", 0, "mod_table", &[2 * h], FinalLayer, Normal(std));
        }
        _ => b.linear("final", 0, "adaln", h, 2 * h, FinalLayer, Zero),
    }
    b.linear(
        "final",
        0,
        "linear",
        h,
        config.patch_dim(),
        FinalLayer,
        Zero,
    );
    b.0
}

/// Per-group parameter counts of a configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub variant: Variant,
    pub groups: BTreeMap<ParamGroup, u64>,
    pub total: u64,
}

impl ParamCount {
    pub fn group(&self, g: ParamGroup) -> u64 {
        self.groups.get(&g).copied().unwrap_or(0)
    }

    pub fn share(&self, g: ParamGroup) -> f64 {
        self.group(g) as f64 / self.total as f64
    }
}

pub fn param_count(config: &ModelConfig) -> ParamCount {
    let mut groups = BTreeMap::new();
    let mut total = 0;
    for spec in param_specs(config) {
        *groups.entry(spec.group).or_insert(0) += spec.numel();
        total += spec.numel();
    }
    ParamCount {
        variant: config.variant,
        groups,
        total,
    }
}

/// How a freshly constructed model draws its weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// DiT-style: zero adaLN projections, zero final projection, zero
    /// cross-attention output; everything else scaled random.
    Standard,
    /// Every weight and bias random (O(1/sqrt(fan_in))), cross-attention output
    /// included. Used to exercise every path in tests and diagnostics.
    Random,
}

pub(crate) fn init_tensor(spec: &ParamSpec, scheme: InitScheme, rng: &mut SeededRng) -> Tensor {
    let shape = &spec.shape;
    match scheme {
        InitScheme::Standard => match spec.init {
            InitKind::Zero => Tensor::zeros(shape),
            InitKind::Normal(std) => Tensor::randn(shape, std, rng),
            InitKind::Xavier => {
                let (fan_in, fan_out) = (shape[0], shape[shape.len() - 1]);
                let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::randn(shape, std, rng)
            }
        },
        InitScheme::Random => {
            let std = if shape.len() == 2
                && !spec.name.ends_with("table")
                && !spec.name.ends_with("token")
            {
                1.0 / (shape[0] as f64).sqrt()
            } else {
                0.1
            };
            Tensor::randn(shape, std, rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_follow_grammar() {
        for v in [
            Variant::DitClassConditional,
            Variant::T2iAdalnPerBlock,
            Variant::T2iAdalnSingle,
        ] {
            for spec in param_specs(&ModelConfig::desk(v)) {
                WeightName::parse(&spec.name).unwrap();
            }
        }
        let n = WeightName::parse("blocks.12.attn_qkv_w").unwrap();
        assert_eq!((n.module, n.index, n.role), ("blocks", 12, "attn_qkv_w"));
        for bad in [
            "blocks.x.w",
            "blocks.1",
            "a.1.b.c",
            "Blocks.1.w",
            "blocks.01.w",
            "blocks..w",
            ".0.w",
        ] {
            assert!(WeightName::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn names_are_unique() {
        let specs = param_specs(&ModelConfig::desk(Variant::T2iAdalnSingle));
        let mut names: Vec<_> = specs.iter().map(|s| &s.name).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn adaln_group_structure() {
        for cfg in [
            ModelConfig::desk(Variant::T2iAdalnSingle),
            ModelConfig::xl(Variant::T2iAdalnSingle),
        ] {
            let (h, d) = (cfg.hidden_size as u64, cfg.depth as u64);
            let global_mlp = h * 6 * h + 6 * h;
            let single = param_count(&cfg);
            assert_eq!(single.group(ParamGroup::Adaln), d * 6 * h + global_mlp);
            let per_block = param_count(&cfg.with_variant(Variant::T2iAdalnPerBlock));
            assert_eq!(per_block.group(ParamGroup::Adaln), d * global_mlp);
        }
    }
}
