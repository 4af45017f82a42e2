//! Versioned JSON model container. `f64` values round-trip bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ModelState;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MODEL_FORMAT: &str = "anchorstream-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Container {
    format: String,
    version: u32,
    model: ModelState,
}

pub fn model_to_json(m: &ModelState) -> Result<String> {
    #[derive(Serialize)]
    struct Borrowed<'a> {
        format: &'a str,
        version: u32,
        model: &'a ModelState,
    }
    Ok(serde_json::to_string(&Borrowed {
        format: MODEL_FORMAT,
        version: MODEL_VERSION,
        model: m,
    })?)
}

/// Parses and validates a model container (shapes are checked against the config).
pub fn model_from_json(s: &str) -> Result<ModelState> {
    let c: Container = serde_json::from_str(s)?;
    if c.format != MODEL_FORMAT {
        return Err(Error::Format(format!("expected format {MODEL_FORMAT}, got {}", c.format)));
    }
    if c.version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model version {}", c.version)));
    }
    check_shapes(&c.model)?;
    Ok(c.model)
}

pub fn save_model(m: &ModelState, path: &Path) -> Result<()> {
    write_atomic(path, model_to_json(m)?.as_bytes())
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    model_from_json(&std::fs::read_to_string(path)?)
}

fn check_shapes(m: &ModelState) -> Result<()> {
    let cfg = &m.config;
    cfg.validate()?;
    let (d, r) = (cfg.d_model, cfg.lora_rank);
    let bad = |what: &str| Error::Format(format!("checkpoint tensor {what} has the wrong shape"));
    let lin = |l: &super::params::Linear, i: usize, o: usize, what: &str| {
        if l.w.shape() != [i, o] || l.b.shape() != [o] {
            Err(bad(what))
        } else {
            Ok(())
        }
    };
    let ln = |l: &super::params::LayerNorm, what: &str| {
        if l.gamma.shape() != [d] || l.beta.shape() != [d] {
            Err(bad(what))
        } else {
            Ok(())
        }
    };
    lin(&m.base.input, cfg.feat_dim, d, "input")?;
    lin(&m.base.head, d, cfg.n_outputs(), "head")?;
    ln(&m.base.ln_final, "ln_final")?;
    if m.base.blocks.len() != cfg.n_layers || m.adapters.layers.len() != cfg.n_layers {
        return Err(Error::Format("layer count disagrees with config".into()));
    }
    for b in &m.base.blocks {
        for p in [&b.query, &b.key, &b.value, &b.output] {
            lin(p, d, d, "attention projection")?;
        }
        lin(&b.ff_in, d, cfg.d_ff, "ff_in")?;
        lin(&b.ff_out, cfg.d_ff, d, "ff_out")?;
        ln(&b.ln_attn, "ln_attn")?;
        ln(&b.ln_ff, "ln_ff")?;
    }
    let targets = cfg.targets();
    for l in &m.adapters.layers {
        let got: Vec<_> = l.iter().map(|a| a.projection).collect();
        if got != targets {
            return Err(Error::Format("adapter targets disagree with config".into()));
        }
        for a in l {
            if a.a.shape() != [r, d] || a.b.shape() != [d, r] {
                return Err(bad("adapter"));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::Rng;

    #[test]
    fn json_round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            d_model: 8,
            d_ff: 8,
            feat_dim: 4,
            vocab_size: 3,
            lora_rank: 2,
            lora_alpha: 4.0,
            ..ModelConfig::default()
        };
        let mut m = ModelState::init(&cfg, &mut Rng::new(3)).unwrap();
        let mut v = m.flatten_trainable();
        let mut rng = Rng::new(4);
        v.iter_mut().for_each(|x| *x = rng.standard_normal() * 1e-7);
        m.unflatten_trainable(&v).unwrap();
        let back = model_from_json(&model_to_json(&m).unwrap()).unwrap();
        for (a, b) in m.base.flatten().iter().zip(back.base.flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in m.flatten_trainable().iter().zip(back.flatten_trainable()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_wrong_format_and_shapes() {
        let cfg = ModelConfig {
            d_model: 4,
            d_ff: 4,
            feat_dim: 2,
            vocab_size: 2,
            lora_rank: 1,
            lora_alpha: 1.0,
            n_layers: 1,
            ..ModelConfig::default()
        };
        let m = ModelState::init(&cfg, &mut Rng::new(1)).unwrap();
        let s = model_to_json(&m).unwrap();
        assert!(model_from_json(&s.replace(MODEL_FORMAT, "other")).is_err());
        let mut broken = m.clone();
        broken.config.d_ff = 5;
        assert!(model_from_json(&model_to_json(&broken).unwrap()).is_err());
    }
}
