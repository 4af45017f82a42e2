use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{PretrainConfig, TrainConfig};
use super::optim::{adamw_step, l2, OptimizerState};
use crate::continual::{total_objective, AbsFisherAccumulator, FisherState, ReplayBuffer, Utterance};
use crate::ctc::{ctc_loss, greedy_decode, LabelSeq};
use crate::error::{Error, Result};
use crate::metrics::{corpus_rate, forgetting, RateLevel};
use crate::model::{GradientSet, ModelConfig, ModelState, ParamSubset};
use crate::rng::Rng;
use crate::stream::StreamDataset;

const STREAM_BASE_INIT: u64 = 0xB0;
const STREAM_PRETRAIN: u64 = 0xB1;
const STREAM_ADAPTERS: u64 = 0xA0;
const STREAM_ADAPT: u64 = 0xA1;

/// Per-utterance CTC negative log-likelihood.
pub fn utterance_loss(model: &ModelState, u: &Utterance) -> Result<f64> {
    let lp = model.forward(&u.feats)?.log_softmax_rows()?;
    Ok(ctc_loss(&lp, &u.reference)?.0)
}

/// Adds `weight · ∂NLL/∂θ` into `grads` and returns the unweighted NLL.
fn accumulate(model: &ModelState, u: &Utterance, weight: f64, grads: &mut GradientSet) -> Result<f64> {
    let cache = model.forward_cached(&u.feats)?;
    let lp = cache.logits().log_softmax_rows()?;
    let (nll, g) = ctc_loss(&lp, &u.reference)?;
    model.backward_with(&cache, &g.scale(weight), grads)?;
    Ok(nll)
}

/// Mean NLL over `batch` and its gradient.
pub fn batch_gradient(model: &ModelState, batch: &[&Utterance], subset: ParamSubset) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let w = 1.0 / batch.len() as f64;
    let mut grads = GradientSet::zeros(model, subset);
    let mut total = 0.0;
    for u in batch {
        total += accumulate(model, u, w, &mut grads)?;
    }
    Ok((total * w, grads))
}

pub fn decode_greedy(model: &ModelState, utts: &[Utterance]) -> Result<Vec<LabelSeq>> {
    utts.iter()
        .map(|u| Ok(greedy_decode(&model.forward(&u.feats)?.log_softmax_rows()?)))
        .collect()
}

/// Pooled `(WER, CER)` in percent for hypotheses against the utterances' references.
pub fn score(utts: &[Utterance], hyps: &[LabelSeq]) -> Result<(f64, f64)> {
    let pairs: Vec<(&[usize], &[usize])> = utts.iter().zip(hyps).map(|(u, h)| (u.reference.tokens(), h.tokens())).collect();
    Ok((corpus_rate(&pairs, RateLevel::Word)?, corpus_rate(&pairs, RateLevel::Character)?))
}

pub fn evaluate(model: &ModelState, utts: &[Utterance]) -> Result<(f64, f64)> {
    score(utts, &decode_greedy(model, utts)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevScores {
    pub target_wer: f64,
    pub target_cer: f64,
    pub general_wer: f64,
    pub general_cer: f64,
}

pub fn evaluate_both(model: &ModelState, data: &StreamDataset) -> Result<DevScores> {
    let (target_wer, target_cer) = evaluate(model, &data.target_dev)?;
    let (general_wer, general_cer) = evaluate(model, &data.general_dev)?;
    Ok(DevScores {
        target_wer,
        target_cer,
        general_wer,
        general_cer,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub epochs: usize,
    pub general_dev_wer: Vec<f64>,
}

/// Full-parameter training of an adapter-free model on general data until the
/// general-dev WER reaches the configured threshold.
pub fn pretrain_base(
    train: &[Utterance],
    dev: &[Utterance],
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(ModelState, PretrainLog)> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::domain("pretraining needs nonempty train and dev sets"));
    }
    let mut base_cfg = model_cfg.clone();
    base_cfg.lora_targets.clear();
    let mut model = ModelState::init(&base_cfg, &mut Rng::derive(seed, STREAM_BASE_INIT))?;
    let mut rng = Rng::derive(seed, STREAM_PRETRAIN);
    let hp = cfg.adamw();
    let mut theta = model.base.flatten();
    let mut opt = OptimizerState::new(theta.len());
    let mut log = PretrainLog {
        epochs: 0,
        general_dev_wer: Vec::new(),
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Utterance> = chunk.iter().map(|&i| &train[i]).collect();
            let (_, grads) = batch_gradient(&model, &batch, ParamSubset::Full)?;
            let g = grads.base.as_ref().expect("full gradient").flatten();
            adamw_step(&mut opt, &mut theta, &g, &hp)?;
            model.base.unflatten(&theta)?;
        }
        let (wer, _) = evaluate(&model, dev)?;
        log::info!("pretrain epoch {epoch}: general dev WER {wer:.2}");
        log.epochs = epoch;
        log.general_dev_wer.push(wer);
        if epoch >= cfg.min_epochs && wer <= cfg.wer_threshold {
            return Ok((model, log));
        }
    }
    let wer = *log.general_dev_wer.last().expect("at least one epoch");
    Err(Error::Convergence {
        wer,
        threshold: cfg.wer_threshold,
        epochs: cfg.max_epochs,
    })
}

/// Frozen base with adapters drawn for the given training config.
pub fn attach_adapters(base: &ModelState, cfg: &TrainConfig, seed: u64) -> Result<ModelState> {
    let mut mc = base.config.clone();
    mc.lora_rank = cfg.lora_rank;
    mc.lora_alpha = cfg.lora_alpha;
    if mc.lora_targets.is_empty() {
        mc.lora_targets = ModelConfig::default().lora_targets;
    }
    base.with_fresh_adapters(&mc, &mut Rng::derive(seed, STREAM_ADAPTERS))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub segment: usize,
    pub target_wer: f64,
    pub target_cer: f64,
    pub general_wer: f64,
    pub general_cer: f64,
    /// General WER minus the pre-adaptation general WER, in points.
    pub forgetting: f64,
    pub mean_train_loss: f64,
    pub max_grad_norm: f64,
    pub steps: usize,
    pub wall_time_s: f64,
}

/// Mutable state of a sequential adaptation run.
pub struct Adaptation {
    pub cfg: TrainConfig,
    pub model: ModelState,
    pub buffer: ReplayBuffer,
    pub fisher: FisherState,
    pub baseline: DevScores,
    pub segments_done: usize,
    rng: Rng,
}

impl Adaptation {
    /// Attaches fresh adapters to `base` and, for replay paradigms, prefills
    /// the general anchor pool.
    pub fn new(base: &ModelState, cfg: &TrainConfig, data: &StreamDataset, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let model = attach_adapters(base, cfg, seed)?;
        let baseline = evaluate_both(&model, data)?;
        let mut rng = Rng::derive(seed, STREAM_ADAPT);
        let mut buffer = ReplayBuffer::new(cfg.cap_general, cfg.cap_target, cfg.hard_fraction, cfg.tau)?;
        if cfg.objective().uses_replay() {
            buffer.refill_general(&data.general_train, &mut rng);
        }
        let fisher = FisherState::new(&model.flatten_trainable(), cfg.lambda);
        Ok(Adaptation {
            cfg: cfg.clone(),
            model,
            buffer,
            fisher,
            baseline,
            segments_done: 0,
            rng,
        })
    }

    fn replay_active(&self) -> bool {
        self.cfg.objective().uses_replay() && !self.buffer.is_empty()
    }

    /// Trains on one segment, then refreshes instance losses, consolidates
    /// importance, updates the buffer and evaluates both dev sets.
    pub fn run_segment(&mut self, segment: &[Utterance], data: &StreamDataset) -> Result<SegmentReport> {
        if segment.is_empty() {
            return Err(Error::domain("empty segment"));
        }
        let start = Instant::now();
        let cfg = self.cfg.clone();
        let mode = cfg.objective();
        let hp = cfg.adamw();
        let mut opt = OptimizerState::new(self.model.trainable_len());
        let mut theta = self.model.flatten_trainable();

        let (n_stream, n_replay) = if self.replay_active() {
            let s = ((cfg.gamma * cfg.batch_size as f64).round() as usize).clamp(1, cfg.batch_size);
            (s, cfg.batch_size - s)
        } else {
            (cfg.batch_size, 0)
        };
        // Same number of optimizer steps for every paradigm: an epoch is
        // ⌈|segment| / B⌉ steps whether or not replay shrinks the stream share.
        let steps_per_epoch = segment.len().div_ceil(cfg.batch_size);
        let mut order: Vec<usize> = (0..segment.len()).collect();
        let (mut loss_sum, mut steps, mut max_norm) = (0.0, 0usize, 0.0f64);
        for _ in 0..cfg.epochs_per_segment {
            self.rng.shuffle(&mut order);
            for chunk in order.chunks(n_stream).take(steps_per_epoch) {
                let mut batch: Vec<&Utterance> = chunk.iter().map(|&i| &segment[i]).collect();
                let replay = if chunk.len() == n_stream {
                    n_replay
                } else {
                    (chunk.len() as f64 * n_replay as f64 / n_stream as f64).round() as usize
                };
                if replay > 0 {
                    batch.extend(crate::continual::sample_buffer(&self.buffer, replay, &mut self.rng));
                }
                // after an update, an overflowing forward pass is the same divergence
                // a non-finite gradient would have reported one step later
                let (ctc, grads) = match batch_gradient(&self.model, &batch, ParamSubset::LoraOnly) {
                    Err(Error::Domain(e)) if steps > 0 => {
                        log::error!("adaptation diverged after {steps} steps: {e}");
                        return Err(Error::GradientExplosion { norm: f64::INFINITY });
                    }
                    r => r?,
                };
                let (_, mut g) = total_objective(ctc, &grads.flat_adapters(), &self.fisher, &theta, mode)?;
                let norm = l2(&g);
                if !norm.is_finite() {
                    return Err(Error::GradientExplosion { norm });
                }
                max_norm = max_norm.max(norm);
                if let Some(c) = cfg.clip_norm {
                    if norm > c {
                        g.iter_mut().for_each(|x| *x *= c / norm);
                    }
                }
                adamw_step(&mut opt, &mut theta, &g, &hp)?;
                self.model.unflatten_trainable(&theta)?;
                loss_sum += ctc;
                steps += 1;
            }
        }

        let mut scored: Vec<Utterance> = segment.to_vec();
        for u in scored.iter_mut() {
            u.last_loss = Some(utterance_loss(&self.model, u)?);
        }
        let mut history = std::mem::take(&mut self.buffer.target);
        for u in history.iter_mut() {
            u.last_loss = Some(utterance_loss(&self.model, u)?);
        }
        self.buffer.target = history;

        if mode.uses_penalty() {
            let mut acc = AbsFisherAccumulator::new(theta.len());
            for u in scored.iter().chain(&self.buffer.general).chain(&self.buffer.target) {
                let mut g = GradientSet::zeros(&self.model, ParamSubset::LoraOnly);
                accumulate(&self.model, u, 1.0, &mut g)?;
                acc.add(&g.flat_adapters())?;
            }
            self.fisher.consolidate(&acc.finish()?, &theta)?;
        }
        if mode.uses_replay() {
            self.buffer.update(&scored, &data.general_train, &mut self.rng)?;
        }

        let dev = evaluate_both(&self.model, data)?;
        let report = SegmentReport {
            segment: self.segments_done + 1,
            target_wer: dev.target_wer,
            target_cer: dev.target_cer,
            general_wer: dev.general_wer,
            general_cer: dev.general_cer,
            forgetting: forgetting(self.baseline.general_wer, dev.general_wer),
            mean_train_loss: loss_sum / steps.max(1) as f64,
            max_grad_norm: max_norm,
            steps,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        self.segments_done += 1;
        log::info!(
            "{} segment {}: target WER {:.2}, general WER {:.2} ({:+.2}), loss {:.3}, max |g| {:.3}",
            cfg.paradigm,
            report.segment,
            report.target_wer,
            report.general_wer,
            report.forgetting,
            report.mean_train_loss,
            report.max_grad_norm
        );
        Ok(report)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutcome {
    pub baseline: DevScores,
    pub reports: Vec<SegmentReport>,
    pub model: ModelState,
    pub base_fingerprint_before: String,
    pub base_fingerprint_after: String,
}

/// Adapts a pretrained base over every target segment in order.
/// `on_segment` sees the live state after each segment (checkpointing hook).
pub fn run_experiment(
    base: &ModelState,
    cfg: &TrainConfig,
    data: &StreamDataset,
    seed: u64,
    mut on_segment: impl FnMut(&Adaptation, &SegmentReport) -> Result<()>,
) -> Result<ExperimentOutcome> {
    let before = base.base.fingerprint();
    let mut run = Adaptation::new(base, cfg, data, seed)?;
    let mut reports = Vec::with_capacity(data.target_segments.len());
    for segment in &data.target_segments {
        let r = run.run_segment(segment, data)?;
        on_segment(&run, &r)?;
        reports.push(r);
    }
    let after = run.model.base.fingerprint();
    Ok(ExperimentOutcome {
        baseline: run.baseline,
        reports,
        model: run.model,
        base_fingerprint_before: before,
        base_fingerprint_after: after,
    })
}
