use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Baseline DiT: per-block adaLN MLP on `class + time`, no text path.
    DitClassConditional,
    /// Text-conditioned DiT with cross-attention and per-block adaLN MLPs on
    /// `time + pooled text`.
    T2iAdalnPerBlock,
    /// Cross-attention plus one shared modulation MLP on time and a trainable
    /// per-block offset table.
    T2iAdalnSingle,
}

impl Variant {
    pub fn is_text_conditioned(self) -> bool {
        !matches!(self, Variant::DitClassConditional)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::DitClassConditional => "dit_class_conditional",
            Variant::T2iAdalnPerBlock => "t2i_adaln_per_block",
            Variant::T2iAdalnSingle => "t2i_adaln_single",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dit_class_conditional" => Ok(Variant::DitClassConditional),
            "t2i_adaln_per_block" => Ok(Variant::T2iAdalnPerBlock),
            "t2i_adaln_single" => Ok(Variant::T2iAdalnSingle),
            other => Err(ModelError::Config(format!("unknown variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub latent_channels: usize,
    /// Width of incoming text-encoder token embeddings.
    pub text_dim: usize,
    pub max_text_tokens: usize,
    pub time_embed_freq_dim: usize,
    /// Class vocabulary of the class-conditional variant.
    pub num_classes: usize,
    pub mlp_ratio: usize,
    /// Token grid (per axis) the positional embedding is calibrated to; other
    /// grids are mapped onto it by coordinate scaling.
    pub base_grid: usize,
    pub variant: Variant,
}

impl ModelConfig {
    /// Hidden 64, depth 4, 4 heads, patch 2, 4 latent channels, text width 64.
    pub fn desk(variant: Variant) -> Self {
        Self {
            hidden_size: 64,
            depth: 4,
            num_heads: 4,
            patch_size: 2,
            latent_channels: 4,
            text_dim: 64,
            max_text_tokens: 16,
            time_embed_freq_dim: 256,
            num_classes: 10,
            mlp_ratio: 4,
            base_grid: 4,
            variant,
        }
    }

    /// DiT-XL/2 geometry with a T5-XXL-width text input (4096) and 120 text tokens.
    /// Only meant for metadata-only parameter counting.
    pub fn xl(variant: Variant) -> Self {
        Self {
            hidden_size: 1152,
            depth: 28,
            num_heads: 16,
            patch_size: 2,
            latent_channels: 4,
            text_dim: 4096,
            max_text_tokens: 120,
            time_embed_freq_dim: 256,
            num_classes: 1000,
            mlp_ratio: 4,
            base_grid: 16,
            variant,
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.hidden_size * self.mlp_ratio
    }

    /// Values per token emitted by the final layer.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.latent_channels
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("depth", self.depth),
            ("num_heads", self.num_heads),
            ("patch_size", self.patch_size),
            ("latent_channels", self.latent_channels),
            ("text_dim", self.text_dim),
            ("max_text_tokens", self.max_text_tokens),
            ("time_embed_freq_dim", self.time_embed_freq_dim),
            ("num_classes", self.num_classes),
            ("mlp_ratio", self.mlp_ratio),
            ("base_grid", self.base_grid),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(ModelError::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !self.hidden_size.is_multiple_of(4) {
            return Err(ModelError::Config(format!(
                "hidden_size {} must be a multiple of 4 for the 2-D positional embedding",
                self.hidden_size
            )));
        }
        if !self.time_embed_freq_dim.is_multiple_of(2) {
            return Err(ModelError::Config(format!(
                "time_embed_freq_dim {} must be even",
                self.time_embed_freq_dim
            )));
        }
        Ok(())
    }

    /// Fields that must agree between a class-conditional source and a
    /// text-conditioned target for weight surgery.
    pub fn surgery_mismatches(&self, other: &ModelConfig) -> Vec<&'static str> {
        let mut out = Vec::new();
        let pairs = [
            ("hidden_size", self.hidden_size, other.hidden_size),
            ("depth", self.depth, other.depth),
            ("num_heads", self.num_heads, other.num_heads),
            ("patch_size", self.patch_size, other.patch_size),
            (
                "latent_channels",
                self.latent_channels,
                other.latent_channels,
            ),
            (
                "time_embed_freq_dim",
                self.time_embed_freq_dim,
                other.time_embed_freq_dim,
            ),
            ("mlp_ratio", self.mlp_ratio, other.mlp_ratio),
        ];
        for (name, a, b) in pairs {
            if a != b {
                out.push(name);
            }
        }
        out
    }
}
