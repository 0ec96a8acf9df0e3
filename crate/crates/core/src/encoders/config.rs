use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Defaults are the full-scale recipe; the
/// desk-scale runs override most dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Per-frame input feature size fed to the frame encoder.
    pub input_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub temporal_layers: usize,
    pub window: usize,
    pub downsample_after_layer: usize,
    pub downsample_factor: usize,
    pub rope_base: f64,
    pub llm_layers: usize,
    pub text_layers: usize,
    pub decoder_layers: usize,
    /// Prototype embedding size D′.
    pub proto_dim: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub dropout: f64,
    pub bn_momentum: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 384,
            hidden: 512,
            heads: 8,
            ffn: 2048,
            temporal_layers: 4,
            window: 7,
            downsample_after_layer: 2,
            downsample_factor: 2,
            rope_base: 10000.0,
            llm_layers: 2,
            text_layers: 2,
            decoder_layers: 2,
            proto_dim: 300,
            lora_rank: 16,
            lora_alpha: 32.0,
            lora_dropout: 0.1,
            dropout: 0.1,
            bn_momentum: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} must split evenly into {} heads", self.hidden, self.heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!("head dimension {} must be even for RoPE", self.head_dim()));
        }
        if self.window.is_multiple_of(2) {
            return bad(format!("attention window {} must be odd", self.window));
        }
        if self.downsample_after_layer > self.temporal_layers {
            return bad("downsample position beyond the temporal stack".into());
        }
        if self.downsample_factor == 0 {
            return bad("downsample factor must be positive".into());
        }
        if self.lora_rank > self.hidden {
            return bad(format!("LoRA rank {} exceeds hidden size {}", self.lora_rank, self.hidden));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.lora_dropout) {
            return bad("dropout probabilities must lie in [0, 1)".into());
        }
        if self.input_dim == 0 || self.proto_dim == 0 || self.ffn == 0 {
            return bad("dimensions must be positive".into());
        }
        Ok(())
    }
}
