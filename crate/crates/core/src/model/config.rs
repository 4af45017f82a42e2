use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention projection that can carry a low-rank adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub const ALL: [Projection; 4] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub feat_dim: usize,
    /// Output symbols excluding the CTC blank.
    pub vocab_size: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    #[serde(default = "default_targets")]
    pub lora_targets: Vec<Projection>,
}

fn default_targets() -> Vec<Projection> {
    vec![Projection::Query, Projection::Value]
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            feat_dim: 16,
            vocab_size: 16,
            lora_rank: 16,
            lora_alpha: 32.0,
            lora_targets: default_targets(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("feat_dim", self.feat_dim),
            ("vocab_size", self.vocab_size),
            ("lora_rank", self.lora_rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.lora_rank > self.d_model {
            return Err(Error::config(format!(
                "lora_rank {} exceeds d_model {}",
                self.lora_rank, self.d_model
            )));
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return Err(Error::config("lora_alpha must be positive and finite"));
        }
        let mut seen = self.lora_targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.lora_targets.len() {
            return Err(Error::config("lora_targets contains duplicates"));
        }
        Ok(())
    }

    /// `α / r`, the multiplier on `B·A`.
    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Logit columns: vocabulary plus the trailing blank.
    pub fn n_outputs(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn blank(&self) -> usize {
        self.vocab_size
    }

    /// Targeted projections in canonical order.
    pub fn targets(&self) -> Vec<Projection> {
        let mut t = self.lora_targets.clone();
        t.sort();
        t
    }

    /// Number of trainable adapter scalars: `Σ r·(d_in + d_out)`.
    pub fn trainable_len(&self) -> usize {
        self.n_layers * self.lora_targets.len() * self.lora_rank * (2 * self.d_model)
    }
}
