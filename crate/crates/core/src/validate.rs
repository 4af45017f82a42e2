//! Oracle suites: exhaustive CTC alignment sums, central finite differences,
//! breadth-first edit distances and the adapter identity start.

use std::time::Instant;

use serde::Serialize;

use crate::ctc::{ctc_loss, LabelSeq};
use crate::error::Result;
use crate::metrics::edit_ops;
use crate::model::{ModelConfig, ModelState, ParamSubset};
use crate::oracle::{all_pairs_edit_costs, brute_force_ctc_nll, finite_difference};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Largest observed deviation, in the suite's own error measure.
    pub worst: f64,
    pub tolerance: f64,
    pub seconds: f64,
}

fn timed(name: &'static str, tolerance: f64, f: impl FnOnce() -> Result<(usize, f64)>) -> Result<SuiteOutcome> {
    let start = Instant::now();
    let (cases, worst) = f()?;
    Ok(SuiteOutcome {
        name,
        passed: worst <= tolerance,
        cases,
        worst,
        tolerance,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn label_seqs(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for k in 0..vocab {
                let mut t: Vec<usize> = s.clone();
                t.push(k);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// `ctc_loss` against exhaustive path enumeration for every label sequence with
/// `T ≤ 4`, `|y| ≤ 2`, `V ≤ 3`, several random logit draws each.
pub fn ctc_suite(seed: u64) -> Result<SuiteOutcome> {
    timed("ctc-brute-force", 1e-10, || {
        let mut rng = Rng::new(seed);
        let (mut cases, mut worst) = (0, 0.0f64);
        for vocab in 1..=3 {
            for t in 1..=4 {
                for labels in label_seqs(vocab, 2) {
                    for _ in 0..3 {
                        let logits = Tensor::gaussian(&mut rng, &[t, vocab + 1], 0.0, 2.0)?;
                        let lp = logits.log_softmax_rows()?;
                        let oracle = brute_force_ctc_nll(&lp, &labels);
                        let dev = match ctc_loss(&lp, &LabelSeq(labels.clone())) {
                            Ok((nll, _)) => (nll - oracle).abs(),
                            Err(_) if oracle.is_infinite() => 0.0,
                            Err(_) => f64::INFINITY,
                        };
                        worst = worst.max(dev);
                        cases += 1;
                    }
                }
            }
        }
        Ok((cases, worst))
    })
}

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        feat_dim: 5,
        vocab_size: 3,
        lora_rank: 2,
        lora_alpha: 4.0,
        ..ModelConfig::default()
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Analytic model + CTC gradients against central differences on `instances`
/// random toy problems, over every adapter parameter and every base parameter.
pub fn gradient_suite(seed: u64, instances: usize) -> Result<SuiteOutcome> {
    timed("finite-differences", 1e-4, || {
        let cfg = toy_model_config();
        let (mut cases, mut worst) = (0, 0.0f64);
        for i in 0..instances as u64 {
            let mut rng = Rng::derive(seed, i);
            let mut m = ModelState::init(&cfg, &mut rng)?;
            let v: Vec<f64> = (0..m.trainable_len()).map(|_| 0.3 * rng.standard_normal()).collect();
            m.unflatten_trainable(&v)?;
            let frames = rng.inclusive(3, 5);
            let feats = Tensor::gaussian(&mut rng, &[frames, cfg.feat_dim], 0.0, 1.0)?;
            let y = LabelSeq(vec![rng.below(cfg.vocab_size), rng.below(cfg.vocab_size)]);
            let nll = |m: &ModelState| -> f64 {
                let lp = m.forward(&feats).and_then(|l| l.log_softmax_rows());
                lp.and_then(|lp| ctc_loss(&lp, &y)).map_or(f64::NAN, |r| r.0)
            };
            let lp = m.forward(&feats)?.log_softmax_rows()?;
            let (_, dlogits) = ctc_loss(&lp, &y)?;
            let g = m.backward(&feats, &dlogits, ParamSubset::Full)?;

            let theta = m.flatten_trainable();
            let fd = finite_difference(
                |x| {
                    let mut p = m.clone();
                    p.unflatten_trainable(x).expect("same length");
                    nll(&p)
                },
                &theta,
                1e-5,
            );
            for (a, n) in g.flat_adapters().iter().zip(&fd) {
                worst = worst.max(rel_err(*a, *n));
            }
            let base = m.base.flatten();
            let fd = finite_difference(
                |x| {
                    let mut p = m.clone();
                    p.base.unflatten(x).expect("same length");
                    nll(&p)
                },
                &base,
                1e-5,
            );
            let analytic = g.base.as_ref().expect("full subset").flatten();
            for (a, n) in analytic.iter().zip(&fd) {
                worst = worst.max(rel_err(*a, *n));
            }
            cases += 1;
        }
        Ok((cases, worst))
    })
}

/// Minimal edit cost from `edit_ops` against breadth-first search over all
/// string pairs of length ≤ `max_len` on a three-letter alphabet.
pub fn edit_distance_suite(max_len: usize) -> Result<SuiteOutcome> {
    timed("edit-distance", 0.0, || {
        let (strings, costs) = all_pairs_edit_costs(3, max_len);
        let mut mismatches = 0usize;
        for (i, a) in strings.iter().enumerate() {
            for (j, b) in strings.iter().enumerate() {
                if edit_ops(a, b).cost() != costs[i][j] as usize {
                    mismatches += 1;
                }
            }
        }
        Ok((strings.len() * strings.len(), mismatches as f64))
    })
}

/// Freshly attached adapters leave the base model's outputs unchanged.
pub fn lora_identity_suite(seed: u64, inputs: usize) -> Result<SuiteOutcome> {
    timed("lora-identity", 1e-12, || {
        let cfg = ModelConfig::default();
        let mut bare_cfg = cfg.clone();
        bare_cfg.lora_targets.clear();
        let mut rng = Rng::new(seed);
        let base = ModelState::init(&bare_cfg, &mut rng)?;
        let adapted = base.with_fresh_adapters(&cfg, &mut rng)?;
        let mut worst = 0.0f64;
        for _ in 0..inputs {
            let t = rng.inclusive(1, 24);
            let x = Tensor::gaussian(&mut rng, &[t, cfg.feat_dim], 0.0, 1.0)?;
            let (a, b) = (base.forward(&x)?, adapted.forward(&x)?);
            for (p, q) in a.data().iter().zip(b.data()) {
                worst = worst.max((p - q).abs());
            }
        }
        Ok((inputs, worst))
    })
}

/// Every suite at its acceptance size.
pub fn run_all(seed: u64) -> Result<Vec<SuiteOutcome>> {
    Ok(vec![
        ctc_suite(seed)?,
        gradient_suite(seed, 20)?,
        edit_distance_suite(6)?,
        lora_identity_suite(seed, 100)?,
    ])
}
