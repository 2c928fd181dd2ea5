//! The conditional velocity network: a DiT-style transformer over mel frames,
//! modulated by the flow time through adaptive layer norm, with a small
//! ConvNeXt character encoder providing frame-aligned text features.

mod dit;
mod ops;
mod params;
mod text;

pub use dit::{backward, forward, forward_trace, timestep_embedding, ModelInput, Trace};
pub use params::{count_params, init_params, param_layout, ParamStore};
pub use text::encode_text;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel width of the depthwise convolutions in the text encoder.
pub const TEXT_KERNEL: usize = 7;

/// Filler token id; also what every position becomes in text-free mode.
pub const FILLER_ID: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub text_embed_dim: usize,
    pub text_ffn_dim: usize,
    /// Number of ConvNeXt blocks in the text encoder.
    pub text_blocks: usize,
    pub text_vocab: usize,
    pub n_mels: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Full-size network: 22 layers, 16 heads, width 1024.
    pub fn paper() -> Self {
        ModelConfig {
            n_layers: 22,
            n_heads: 16,
            hidden_dim: 1024,
            ffn_dim: 2048,
            text_embed_dim: 512,
            text_ffn_dim: 1024,
            text_blocks: 4,
            text_vocab: 257,
            n_mels: 100,
            dropout: 0.1,
        }
    }

    /// Desk-scale network used for tests and toy training.
    pub fn tiny() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            hidden_dim: 64,
            ffn_dim: 128,
            text_embed_dim: 32,
            text_ffn_dim: 64,
            text_blocks: 2,
            text_vocab: 257,
            n_mels: 100,
            dropout: 0.1,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::config(format!(
                "unknown model preset '{other}' (expected 'tiny' or 'paper')"
            ))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("text_embed_dim", self.text_embed_dim),
            ("text_ffn_dim", self.text_ffn_dim),
            ("text_vocab", self.text_vocab),
            ("n_mels", self.n_mels),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be at least 1")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "model.hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::config("rotary embedding needs an even head dimension"));
        }
        if !self.hidden_dim.is_multiple_of(2) {
            return Err(Error::config("model.hidden_dim must be even"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Character transcript, one byte per token (`byte + 1`), with `0` as filler.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TextCondition {
    pub char_ids: Vec<u32>,
    pub present: bool,
}

impl TextCondition {
    pub fn from_text(text: &str) -> Self {
        TextCondition {
            char_ids: text.bytes().map(|b| b as u32 + 1).collect(),
            present: true,
        }
    }

    /// Text-free mode.
    pub fn absent() -> Self {
        TextCondition {
            char_ids: Vec::new(),
            present: false,
        }
    }

    pub fn from_optional(text: Option<&str>) -> Self {
        text.map(Self::from_text).unwrap_or_else(Self::absent)
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if let Some(&id) = self.char_ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::domain(format!(
                "character id {id} outside vocabulary of {vocab}"
            )));
        }
        Ok(())
    }

    /// Token ids padded with filler (or truncated) to `frames`.
    pub fn frame_ids(&self, frames: usize) -> Vec<usize> {
        let mut ids = vec![FILLER_ID as usize; frames];
        if self.present {
            for (slot, &id) in ids.iter_mut().zip(&self.char_ids) {
                *slot = id as usize;
            }
        }
        ids
    }
}
