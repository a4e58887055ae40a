use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::GeluKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalKind {
    /// Learned table added to token embeddings (GPT-2).
    LearnedAbsolute,
    /// Rotary rotation of queries and keys inside attention.
    Rotary,
}

/// Architecture hyperparameters. Serialized as the companion config JSON of a
/// weight container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Size of the position range, N.
    pub max_positions: usize,
    pub positional_kind: PositionalKind,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f32,
    /// Reuse the token embedding as the output projection.
    #[serde(default = "default_true")]
    pub tie_lm_head: bool,
    #[serde(default)]
    pub gelu: GeluKind,
    #[serde(default = "default_rotary_base")]
    pub rotary_base: f32,
    /// Token prepended once as a shared BOS, if the model family uses one.
    #[serde(default)]
    pub bos_token_id: Option<u32>,
}

fn default_ln_eps() -> f32 {
    1e-5
}

fn default_true() -> bool {
    true
}

fn default_rotary_base() -> f32 {
    10_000.0
}

impl ModelConfig {
    /// Desk-scale test model: 2 layers, 4 heads, d=32, vocab 100, N=64.
    pub fn tiny(positional_kind: PositionalKind) -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            d_ff: 128,
            vocab_size: 100,
            max_positions: 64,
            positional_kind,
            ln_eps: default_ln_eps(),
            tie_lm_head: true,
            gelu: GeluKind::Tanh,
            rotary_base: default_rotary_base(),
            bos_token_id: None,
        }
    }

    pub fn gpt2_small() -> Self {
        Self {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_ff: 3072,
            vocab_size: 50257,
            max_positions: 1024,
            positional_kind: PositionalKind::LearnedAbsolute,
            ln_eps: default_ln_eps(),
            tie_lm_head: true,
            gelu: GeluKind::Tanh,
            rotary_base: default_rotary_base(),
            bos_token_id: None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail("layer, head and width counts must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_positions < 2 {
            return fail(format!("max_positions must be at least 2, got {}", self.max_positions));
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.positional_kind == PositionalKind::Rotary && !self.head_dim().is_multiple_of(2) {
            return fail(format!("rotary needs an even head dimension, got {}", self.head_dim()));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return fail(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        if let Some(bos) = self.bos_token_id {
            if bos as usize >= self.vocab_size {
                return fail(format!("bos_token_id {bos} outside vocabulary"));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
