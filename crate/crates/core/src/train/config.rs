use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use crate::continual::Objective;
use crate::error::{Error, Result};

/// Named adaptation strategies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Paradigm {
    /// Naive LoRA fine-tuning.
    #[serde(rename = "V1.1")]
    V1_1,
    /// Target-history replay only.
    #[serde(rename = "V2.1")]
    V2_1,
    /// Target-history plus general-anchor replay.
    #[serde(rename = "V3.1")]
    V3_1,
    /// Elastic penalty only.
    #[serde(rename = "V4.5")]
    V4_5,
    /// Multi-domain replay plus elastic penalty.
    #[serde(rename = "V5.1")]
    V5_1,
}

impl Paradigm {
    pub const ALL: [Paradigm; 5] = [Paradigm::V1_1, Paradigm::V2_1, Paradigm::V3_1, Paradigm::V4_5, Paradigm::V5_1];

    pub fn name(self) -> &'static str {
        match self {
            Paradigm::V1_1 => "V1.1",
            Paradigm::V2_1 => "V2.1",
            Paradigm::V3_1 => "V3.1",
            Paradigm::V4_5 => "V4.5",
            Paradigm::V5_1 => "V5.1",
        }
    }

    pub fn objective(self) -> Objective {
        match self {
            Paradigm::V1_1 => Objective::Naive,
            Paradigm::V2_1 | Paradigm::V3_1 => Objective::Er,
            Paradigm::V4_5 => Objective::Ewc,
            Paradigm::V5_1 => Objective::Hybrid,
        }
    }

    pub fn valid_names() -> String {
        Paradigm::ALL.map(Paradigm::name).join(", ")
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Paradigm::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown preset {s:?}; valid presets: {}", Paradigm::valid_names())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub paradigm: Paradigm,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub epochs_per_segment: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Stream share of each mixed batch.
    pub gamma: f64,
    pub lambda: f64,
    pub cap_general: usize,
    pub cap_target: usize,
    pub hard_fraction: f64,
    pub tau: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Global-norm clip on the step gradient; off unless set.
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    /// Resolved hyperparameters of a named preset.
    pub fn preset(p: Paradigm) -> Self {
        let mut c = TrainConfig {
            paradigm: p,
            lr: DEFAULT_LR,
            weight_decay: 0.01,
            warmup_steps: 10,
            epochs_per_segment: 3,
            batch_size: 64,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            gamma: 0.5,
            lambda: 0.0,
            cap_general: 0,
            cap_target: 0,
            hard_fraction: 0.6,
            tau: 1.0,
            lora_rank: 24,
            lora_alpha: 48.0,
            clip_norm: None,
        };
        match p {
            Paradigm::V1_1 => {
                c.lora_rank = 16;
                c.lora_alpha = 32.0;
            }
            Paradigm::V2_1 => c.cap_target = 400,
            Paradigm::V3_1 => {
                c.cap_target = 300;
                c.cap_general = 300;
            }
            Paradigm::V4_5 => c.lambda = 10.0,
            Paradigm::V5_1 => {
                c.lambda = 100.0;
                c.cap_target = 300;
                c.cap_general = 300;
            }
        }
        c
    }

    pub fn objective(&self) -> Objective {
        self.paradigm.objective()
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr {} must be positive", self.lr)));
        }
        if self.epochs_per_segment == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs_per_segment and batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.objective().uses_replay() && self.gamma == 0.0 {
            return Err(Error::config("gamma 0 leaves no room for stream data"));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return Err(Error::config(format!("hard_fraction {} outside [0, 1]", self.hard_fraction)));
        }
        for (name, x) in [
            ("weight_decay", self.weight_decay),
            ("lambda", self.lambda),
            ("tau", self.tau),
            ("adam_eps", self.adam_eps),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::config(format!("{name} {x} must be finite and ≥ 0")));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if self.lora_rank == 0 || !(self.lora_alpha > 0.0 && self.lora_alpha.is_finite()) {
            return Err(Error::config("lora_rank and lora_alpha must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config(format!("clip_norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// Adapter learning rate shipped with every preset. At the reference 3e-4 a
/// 30-step toy segment forgets too little to tell the paradigms apart.
pub const DEFAULT_LR: f64 = 1e-3;
/// Reference learning rate, kept for the override path (`{"train": {"lr": 3e-4}}`).
pub const REFERENCE_LR: f64 = 3e-4;

/// Full-parameter training of the base on general-domain data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub min_epochs: usize,
    pub max_epochs: usize,
    /// General-dev WER (percent) the base must reach.
    pub wer_threshold: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 3e-3,
            weight_decay: 0.0,
            warmup_steps: 20,
            batch_size: 32,
            min_epochs: 6,
            max_epochs: 30,
            wer_threshold: 15.0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("pretrain lr must be positive and weight_decay ≥ 0"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.min_epochs > self.max_epochs {
            return Err(Error::config("pretrain needs batch_size ≥ 1 and 1 ≤ max_epochs, min_epochs ≤ max_epochs"));
        }
        if !(self.wer_threshold >= 0.0) {
            return Err(Error::config("wer_threshold must be ≥ 0"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for p in Paradigm::ALL {
            assert_eq!(p.name().parse::<Paradigm>().unwrap(), p);
            let json = serde_json::to_string(&p).unwrap();
            assert_eq!(json, format!("\"{}\"", p.name()));
        }
        let err = "V9.9".parse::<Paradigm>().unwrap_err().to_string();
        assert!(err.contains("V1.1") && err.contains("V5.1"), "{err}");
    }

    #[test]
    fn presets_validate() {
        for p in Paradigm::ALL {
            TrainConfig::preset(p).validate().unwrap();
        }
    }
}
