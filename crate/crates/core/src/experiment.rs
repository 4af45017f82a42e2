//! Resolved experiment configuration and result files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ctc::{beam_decode, train_lm, BeamConfig, CharNgramLM, LabelSeq};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{ModelConfig, ModelState};
use crate::stream::{StreamConfig, StreamDataset};
use crate::train::{decode_greedy, score, DevScores, Paradigm, PretrainConfig, SegmentReport, TrainConfig};

/// Everything that determines a run. A preset plus overrides resolves to
/// exactly one of these; it is written next to the results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Paradigm,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub stream: StreamConfig,
    /// Fill the `wall_time_s` CSV column with measured times. Off by default
    /// so that reruns produce byte-identical files.
    pub record_wall_time: bool,
}

pub const DEFAULT_SEED: u64 = 7;

impl ExperimentConfig {
    pub fn preset(p: Paradigm, seed: u64) -> Self {
        let train = TrainConfig::preset(p);
        let model = ModelConfig {
            lora_rank: train.lora_rank,
            lora_alpha: train.lora_alpha,
            ..ModelConfig::default()
        };
        ExperimentConfig {
            preset: p,
            seed,
            model,
            train,
            pretrain: PretrainConfig::default(),
            stream: StreamConfig::default(),
            record_wall_time: false,
        }
    }

    /// Preset defaults with a JSON object of overrides merged on top. Keys
    /// unknown at any level are rejected. A `preset` key inside the
    /// overrides selects the starting preset when `preset` is `None`.
    pub fn resolve(preset: Option<Paradigm>, seed: Option<u64>, overrides: Option<&Value>) -> Result<Self> {
        let from_file = match overrides.and_then(|o| o.get("preset")) {
            Some(v) => Some(serde_json::from_value::<Paradigm>(v.clone()).map_err(|_| {
                Error::config(format!("unknown preset {v}; valid presets: {}", Paradigm::valid_names()))
            })?),
            None => None,
        };
        let p = preset.or(from_file).unwrap_or(Paradigm::V3_1);
        let mut value = serde_json::to_value(ExperimentConfig::preset(p, DEFAULT_SEED))?;
        if let Some(o) = overrides {
            if !o.is_object() {
                return Err(Error::config("config file must hold a JSON object"));
            }
            merge(&mut value, o);
        }
        // adapter shape follows train.lora_* unless the model section pins it
        for key in ["lora_rank", "lora_alpha"] {
            let pinned = overrides.and_then(|o| o.get("model")).and_then(|m| m.get(key)).is_some();
            if !pinned {
                let v = value["train"][key].clone();
                value["model"][key] = v;
            }
        }
        value["preset"] = serde_json::to_value(p)?;
        if let Some(s) = seed {
            value["seed"] = s.into();
        }
        let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.pretrain.validate()?;
        self.stream.validate()?;
        if self.model.lora_rank != self.train.lora_rank || self.model.lora_alpha != self.train.lora_alpha {
            return Err(Error::config(
                "model.lora_rank/lora_alpha must equal train.lora_rank/lora_alpha (set them under train)",
            ));
        }
        if self.model.feat_dim != self.stream.feat_dim || self.model.vocab_size != self.stream.vocab_size {
            return Err(Error::config("model and stream disagree on feat_dim or vocab_size"));
        }
        Ok(())
    }

    /// Subset of the config that determines the pretrained base.
    pub fn base_key(&self) -> Value {
        let mut model = self.model.clone();
        model.lora_targets.clear();
        model.lora_rank = 1;
        model.lora_alpha = 1.0;
        serde_json::json!({
            "seed": self.seed,
            "model": model,
            "pretrain": self.pretrain,
            "stream": self.stream,
        })
    }
}

fn merge(into: &mut Value, from: &Value) {
    match (into, from) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                match a.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        a.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

pub const SEGMENTS_HEADER: &str =
    "segment,target_wer,target_cer,general_wer,general_cer,forgetting,mean_loss,max_grad_norm,wall_time_s";

/// One row per segment. Floats use the shortest round-trip representation;
/// `wall_time_s` stays empty unless requested.
pub fn segments_csv(reports: &[SegmentReport], record_wall_time: bool) -> String {
    let mut s = String::from(SEGMENTS_HEADER);
    s.push('\n');
    for r in reports {
        let wall = if record_wall_time { format!("{:.3}", r.wall_time_s) } else { String::new() };
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.segment,
            r.target_wer,
            r.target_cer,
            r.general_wer,
            r.general_cer,
            r.forgetting,
            r.mean_train_loss,
            r.max_grad_norm,
            wall
        ));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub preset: Paradigm,
    pub seed: u64,
    pub baseline: DevScores,
    pub final_scores: DevScores,
    pub final_forgetting: f64,
    pub max_grad_norm: f64,
    pub base_fingerprint: String,
    pub config: ExperimentConfig,
    pub segments: Vec<SegmentReport>,
}

impl Summary {
    pub fn new(cfg: &ExperimentConfig, baseline: DevScores, reports: &[SegmentReport], base_fingerprint: String) -> Result<Self> {
        let last = reports.last().ok_or_else(|| Error::domain("no segment reports to summarise"))?;
        let mut segments = reports.to_vec();
        if !cfg.record_wall_time {
            segments.iter_mut().for_each(|r| r.wall_time_s = 0.0);
        }
        Ok(Summary {
            preset: cfg.preset,
            seed: cfg.seed,
            baseline,
            final_scores: DevScores {
                target_wer: last.target_wer,
                target_cer: last.target_cer,
                general_wer: last.general_wer,
                general_cer: last.general_cer,
            },
            final_forgetting: last.forgetting,
            max_grad_norm: reports.iter().map(|r| r.max_grad_norm).fold(0.0, f64::max),
            base_fingerprint,
            config: cfg.clone(),
            segments,
        })
    }
}

/// Writes `segments.csv`, `summary.json` and `config.json` into `out_dir`,
/// each atomically.
pub fn emit_results(summary: &Summary, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    write_atomic(
        &out_dir.join("segments.csv"),
        segments_csv(&summary.segments, summary.config.record_wall_time).as_bytes(),
    )?;
    write_atomic(&out_dir.join("summary.json"), serde_json::to_string_pretty(summary)?.as_bytes())?;
    write_atomic(&out_dir.join("config.json"), serde_json::to_string_pretty(&summary.config)?.as_bytes())?;
    Ok(())
}

/// Shallow-fusion settings for the LM spot check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmCheckConfig {
    pub order: usize,
    pub smoothing: f64,
    pub beam_width: usize,
    pub lm_weight: f64,
    pub word_bonus: f64,
}

impl Default for LmCheckConfig {
    fn default() -> Self {
        LmCheckConfig {
            order: 3,
            smoothing: 0.1,
            beam_width: 8,
            lm_weight: 0.5,
            // offsets the per-symbol LM cost that otherwise favours deletions
            word_bonus: 1.0,
        }
    }
}

/// Target-dev WER of two models, each decoded greedily and with beam search
/// plus an n-gram model trained on the target training references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmCheck {
    pub baseline_greedy: f64,
    pub baseline_lm: f64,
    pub adapted_greedy: f64,
    pub adapted_lm: f64,
    pub lm_perplexity: f64,
}

pub fn target_lm(data: &StreamDataset, vocab_size: usize, cfg: &LmCheckConfig) -> Result<CharNgramLM> {
    let corpus: Vec<LabelSeq> = data.target_train().map(|u| u.reference.clone()).collect();
    train_lm(&corpus, cfg.order, cfg.smoothing, vocab_size)
}

pub fn decode_with_lm(model: &ModelState, data: &StreamDataset, lm: &CharNgramLM, cfg: &LmCheckConfig) -> Result<f64> {
    let beam = BeamConfig {
        beam_width: cfg.beam_width,
        lm_weight: cfg.lm_weight,
        word_bonus: cfg.word_bonus,
    };
    let hyps = data
        .target_dev
        .iter()
        .map(|u| beam_decode(&model.forward(&u.feats)?.log_softmax_rows()?, &beam, Some(lm)))
        .collect::<Result<Vec<_>>>()?;
    Ok(score(&data.target_dev, &hyps)?.0)
}

pub fn lm_check(baseline: &ModelState, adapted: &ModelState, data: &StreamDataset, cfg: &LmCheckConfig) -> Result<LmCheck> {
    let lm = target_lm(data, baseline.config.vocab_size, cfg)?;
    let dev_refs: Vec<LabelSeq> = data.target_dev.iter().map(|u| u.reference.clone()).collect();
    let greedy = |m: &ModelState| -> Result<f64> { Ok(score(&data.target_dev, &decode_greedy(m, &data.target_dev)?)?.0) };
    Ok(LmCheck {
        baseline_greedy: greedy(baseline)?,
        baseline_lm: decode_with_lm(baseline, data, &lm, cfg)?,
        adapted_greedy: greedy(adapted)?,
        adapted_lm: decode_with_lm(adapted, data, &lm, cfg)?,
        lm_perplexity: lm.perplexity(&dev_refs),
    })
}

pub fn lm_check_csv(c: &LmCheck) -> String {
    format!(
        "model,greedy_wer,lm_wer\nbaseline,{},{}\nadapted,{},{}\n",
        c.baseline_greedy, c.baseline_lm, c.adapted_greedy, c.adapted_lm
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_merge_and_unknown_keys_fail() {
        let o = json!({"train": {"lambda": 0.0}, "stream": {"k_segments": 2}});
        let c = ExperimentConfig::resolve(Some(Paradigm::V5_1), Some(3), Some(&o)).unwrap();
        assert_eq!(c.train.lambda, 0.0);
        assert_eq!(c.train.cap_general, 300);
        assert_eq!(c.stream.k_segments, 2);
        assert_eq!(c.seed, 3);

        for bad in [json!({"train": {"lamda": 1.0}}), json!({"trian": {}}), json!({"preset": "V7"})] {
            assert!(matches!(ExperimentConfig::resolve(None, None, Some(&bad)), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn file_preset_used_when_flag_absent() {
        let o = json!({"preset": "V4.5"});
        assert_eq!(ExperimentConfig::resolve(None, None, Some(&o)).unwrap().train.lambda, 10.0);
        let c = ExperimentConfig::resolve(Some(Paradigm::V1_1), None, Some(&o)).unwrap();
        assert_eq!(c.preset, Paradigm::V1_1);
        assert_eq!(c.train.lambda, 0.0);
    }

    #[test]
    fn rank_must_agree() {
        let o = json!({"train": {"lora_rank": 8}});
        let c = ExperimentConfig::resolve(Some(Paradigm::V1_1), None, Some(&o)).unwrap();
        assert_eq!((c.train.lora_rank, c.model.lora_rank), (8, 8));
        let o = json!({"train": {"lora_rank": 8}, "model": {"lora_rank": 4}});
        assert!(ExperimentConfig::resolve(Some(Paradigm::V1_1), None, Some(&o)).is_err());
    }

    #[test]
    fn csv_shape() {
        let r = SegmentReport {
            segment: 1,
            target_wer: 40.5,
            target_cer: 30.25,
            general_wer: 12.0,
            general_cer: 11.0,
            forgetting: 0.5,
            mean_train_loss: 7.0,
            max_grad_norm: 3.5,
            steps: 12,
            wall_time_s: 1.2345,
        };
        let csv = segments_csv(&[r.clone(), r.clone()], false);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], SEGMENTS_HEADER);
        assert_eq!(lines[1], "1,40.5,30.25,12,11,0.5,7,3.5,");
        let timed = segments_csv(&[r], true);
        assert!(!timed.lines().nth(1).unwrap().ends_with(','));
    }
}
