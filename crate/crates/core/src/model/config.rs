use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How much of each layer is duplicated per modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Separation {
    /// Modality-specific attention (norm, QKV, O) and FFN.
    Deep,
    /// Shared attention, modality-specific FFN.
    Shallow,
    /// One dense weight set for both modalities.
    #[serde(rename = "none")]
    Dense,
}

impl Separation {
    pub const ALL: [Separation; 3] = [Separation::Dense, Separation::Shallow, Separation::Deep];

    pub fn name(self) -> &'static str {
        match self {
            Separation::Deep => "deep",
            Separation::Shallow => "shallow",
            Separation::Dense => "none",
        }
    }

    pub fn separate_attention(self) -> bool {
        self == Separation::Deep
    }

    pub fn separate_ffn(self) -> bool {
        self != Separation::Dense
    }
}

impl std::str::FromStr for Separation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deep" => Ok(Separation::Deep),
            "shallow" => Ok(Separation::Shallow),
            "none" | "dense" => Ok(Separation::Dense),
            other => Err(Error::Config(format!("unknown separation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    /// Flattened length of one latent patch.
    pub patch_dim: usize,
    pub patches_per_image: usize,
    /// Number of diffusion steps `T`.
    pub diffusion_steps: usize,
    pub separation: Separation,
    pub max_seq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            ffn_hidden: 128,
            vocab_size: 24,
            patch_dim: 16,
            patches_per_image: 4,
            diffusion_steps: 1000,
            separation: Separation::Deep,
            max_seq: 32,
        }
    }
}

impl ModelConfig {
    /// Default geometry with `T = 100`.
    pub fn desk() -> Self {
        ModelConfig {
            diffusion_steps: 100,
            ..Default::default()
        }
    }

    pub fn with_separation(mut self, separation: Separation) -> Self {
        self.separation = separation;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("vocab_size", self.vocab_size),
            ("patch_dim", self.patch_dim),
            ("patches_per_image", self.patches_per_image),
            ("diffusion_steps", self.diffusion_steps),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.d_model {} is not divisible by model.n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) || !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(
                "rotary and timestep embeddings need even head_dim and d_model".into(),
            ));
        }
        if self.vocab_size <= crate::model::NULL as usize {
            return Err(Error::Config(
                "model.vocab_size must cover the five special tokens".into(),
            ));
        }
        Ok(())
    }
}
