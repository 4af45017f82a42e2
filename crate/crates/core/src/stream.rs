//! Synthetic two-domain token stream.
//!
//! Both domains share one table of token embeddings. The clean domain passes
//! them through an identity channel with light noise; the distorted domain
//! uses an ill-conditioned mixing matrix, heavier noise and a skewed,
//! strongly sequential token distribution.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::continual::{BalanceAttr, Domain, Utterance};
use crate::ctc::LabelSeq;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm_nt, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub domain: Domain,
    /// `[vocab × feat_dim]`, shared across domains.
    pub embeddings: Tensor,
    /// `[feat_dim × feat_dim]`; a frame is `channel · embedding + noise`.
    pub channel: Tensor,
    /// `[feat_dim]`, added to every frame.
    pub offset: Vec<f64>,
    pub noise_std: f64,
    /// Distribution of the first token.
    pub token_prior: Vec<f64>,
    /// Row-stochastic successor weights; the diagonal must be zero so that
    /// sequences never repeat a token back to back.
    pub transitions: Vec<Vec<f64>>,
    pub frames_per_token: (usize, usize),
    pub seq_len: (usize, usize),
    /// Probability of balance attribute `A`.
    pub balance_mix: f64,
}

impl DomainSpec {
    pub fn vocab_size(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn feat_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (v, d) = (self.vocab_size(), self.feat_dim());
        if v < 2 || self.embeddings.shape().len() != 2 {
            return Err(Error::domain("need at least two token embeddings"));
        }
        if self.channel.shape() != [d, d] {
            return Err(Error::shape(format!("channel {:?} for feat_dim {d}", self.channel.shape())));
        }
        if self.offset.len() != d || self.offset.iter().any(|x| !x.is_finite()) {
            return Err(Error::shape(format!("offset has {} entries for feat_dim {d}", self.offset.len())));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::domain(format!("noise_std {}", self.noise_std)));
        }
        let dist_ok = |w: &[f64]| w.len() == v && w.iter().all(|x| *x >= 0.0 && x.is_finite()) && w.iter().sum::<f64>() > 0.0;
        if !dist_ok(&self.token_prior) {
            return Err(Error::domain("token_prior must be a nonnegative weight vector over the vocabulary"));
        }
        if self.transitions.len() != v {
            return Err(Error::domain("transitions must have one row per token"));
        }
        for (i, row) in self.transitions.iter().enumerate() {
            if !dist_ok(row) || row[i] != 0.0 {
                return Err(Error::domain(format!("transition row {i} invalid")));
            }
        }
        let (f0, f1) = self.frames_per_token;
        let (l0, l1) = self.seq_len;
        if f0 == 0 || f0 > f1 || l0 == 0 || l0 > l1 {
            return Err(Error::domain("empty frames_per_token or seq_len range"));
        }
        if !(0.0..=1.0).contains(&self.balance_mix) {
            return Err(Error::domain(format!("balance_mix {}", self.balance_mix)));
        }
        Ok(())
    }
}

/// One utterance: a token chain, each token held for a random number of
/// frames of `channel · e_t + offset + N(0, noise²)`.
pub fn synth_utterance(spec: &DomainSpec, id: impl Into<String>, rng: &mut Rng) -> Result<Utterance> {
    spec.validate()?;
    let d = spec.feat_dim();
    let len = rng.inclusive(spec.seq_len.0, spec.seq_len.1);
    let mut tokens = Vec::with_capacity(len);
    tokens.push(rng.categorical(&spec.token_prior));
    while tokens.len() < len {
        let prev = *tokens.last().expect("nonempty");
        tokens.push(rng.categorical(&spec.transitions[prev]));
    }
    let attr = if rng.uniform() < spec.balance_mix { BalanceAttr::A } else { BalanceAttr::B };

    let mut data = Vec::new();
    let mut frame = vec![0.0; d];
    for &t in &tokens {
        let reps = rng.inclusive(spec.frames_per_token.0, spec.frames_per_token.1);
        frame.copy_from_slice(&spec.offset);
        gemm_nt(spec.embeddings.row(t), spec.channel.data(), &mut frame, 1, d, d);
        for _ in 0..reps {
            data.extend(frame.iter().map(|&x| x + spec.noise_std * rng.standard_normal()));
        }
    }
    let frames = data.len() / d;
    let feats = Tensor::from_vec(vec![frames, d], data)?;
    let reference = LabelSeq::new(tokens, spec.vocab_size())?;
    Ok(Utterance::new(id, feats, reference, spec.domain, attr))
}

/// Which acoustic condition the target dev set is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DevCondition {
    /// The last segment's condition, i.e. the fully distorted deployment channel.
    Final,
    /// Round-robin over every segment's condition.
    Cycle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub k_segments: usize,
    pub per_segment: usize,
    pub general_train: usize,
    pub general_dev: usize,
    pub target_dev: usize,
    pub feat_dim: usize,
    pub vocab_size: usize,
    pub general_noise: f64,
    pub target_noise: f64,
    /// Ratio of largest to smallest singular value of the target channel.
    pub target_condition: f64,
    /// Fraction of first-token mass on the favoured third of the vocabulary.
    pub target_skew: f64,
    /// Fraction of successor mass on each token's preferred successors.
    pub target_bigram_mass: f64,
    pub preferred_successors: usize,
    /// Angle (radians) of the plane rotations folded into the target channel.
    pub target_rotation: f64,
    /// Norm of the constant line signature added to every target frame.
    pub target_offset: f64,
    /// Std of the per-segment additive perturbation of the target channel.
    pub segment_jitter: f64,
    /// Per-segment boost of a random quarter of the vocabulary.
    pub segment_drift: f64,
    /// Distortion severity of the first segment; later segments ramp to 1.
    pub severity_start: f64,
    pub target_dev_condition: DevCondition,
    pub frames_per_token: (usize, usize),
    pub seq_len: (usize, usize),
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            k_segments: 8,
            per_segment: 600,
            general_train: 2000,
            general_dev: 300,
            target_dev: 300,
            feat_dim: 16,
            vocab_size: 16,
            general_noise: 0.25,
            target_noise: 0.2,
            target_condition: 12.5,
            target_skew: 0.7,
            target_bigram_mass: 0.85,
            preferred_successors: 3,
            target_rotation: 0.45,
            target_offset: 0.45,
            segment_jitter: 0.05,
            segment_drift: 0.0,
            severity_start: 0.0,
            target_dev_condition: DevCondition::Final,
            frames_per_token: (2, 3),
            seq_len: (3, 8),
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_segments == 0 || self.per_segment == 0 {
            return Err(Error::config("k_segments and per_segment must be at least 1"));
        }
        if self.general_train == 0 || self.general_dev == 0 || self.target_dev == 0 {
            return Err(Error::config("train and dev sets must be nonempty"));
        }
        if self.vocab_size < 2 || self.feat_dim == 0 {
            return Err(Error::config("vocab_size must be ≥ 2 and feat_dim ≥ 1"));
        }
        if self.preferred_successors == 0 || self.preferred_successors >= self.vocab_size {
            return Err(Error::config("preferred_successors must lie in [1, vocab_size)"));
        }
        for (name, x) in [
            ("target_skew", self.target_skew),
            ("target_bigram_mass", self.target_bigram_mass),
            ("severity_start", self.severity_start),
        ] {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::config(format!("{name} {x} outside [0, 1]")));
            }
        }
        if !(self.target_condition >= 1.0 && self.target_condition.is_finite()) {
            return Err(Error::config("target_condition must be ≥ 1"));
        }
        for (name, x) in [
            ("general_noise", self.general_noise),
            ("target_noise", self.target_noise),
            ("segment_jitter", self.segment_jitter),
            ("target_rotation", self.target_rotation),
            ("target_offset", self.target_offset),
            ("segment_drift", self.segment_drift),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::config(format!("{name} {x} must be finite and ≥ 0")));
            }
        }
        let (f0, f1) = self.frames_per_token;
        let (l0, l1) = self.seq_len;
        if f0 == 0 || f0 > f1 || l0 == 0 || l0 > l1 {
            return Err(Error::config("frames_per_token and seq_len must be nonempty ranges starting ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamDataset {
    pub seed: u64,
    pub general_train: Vec<Utterance>,
    pub general_dev: Vec<Utterance>,
    pub target_segments: Vec<Vec<Utterance>>,
    pub target_dev: Vec<Utterance>,
}

impl StreamDataset {
    pub fn target_train(&self) -> impl Iterator<Item = &Utterance> {
        self.target_segments.iter().flatten()
    }

    fn splits(&self) -> impl Iterator<Item = (Split, &Utterance)> {
        let segs = self
            .target_segments
            .iter()
            .enumerate()
            .flat_map(|(k, s)| s.iter().map(move |u| (Split::Segment(k), u)));
        self.general_train
            .iter()
            .map(|u| (Split::GeneralTrain, u))
            .chain(self.general_dev.iter().map(|u| (Split::GeneralDev, u)))
            .chain(segs)
            .chain(self.target_dev.iter().map(|u| (Split::TargetDev, u)))
    }

    pub fn len(&self) -> usize {
        self.splits().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Split {
    GeneralTrain,
    GeneralDev,
    Segment(usize),
    TargetDev,
}

impl Split {
    fn stream_base(self) -> u64 {
        match self {
            Split::GeneralTrain => 1 << 32,
            Split::GeneralDev => 2 << 32,
            Split::TargetDev => 3 << 32,
            Split::Segment(k) => (16 + k as u64) << 32,
        }
    }
}

const STREAM_EMBED: u64 = 0xE;
const STREAM_CHANNEL: u64 = 0xC;
const STREAM_PRIOR: u64 = 0xD;
const STREAM_JITTER: u64 = 0xF;
const STREAM_DRIFT: u64 = 0x10;

fn orthogonal(rng: &mut Rng, d: usize) -> Tensor {
    // Gram-Schmidt on a gaussian matrix; rows form an orthonormal basis.
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            rows.push(v);
        }
    }
    Tensor::from_rows(&rows)
}

/// The two domain specs used by [`build_stream`] for a given seed.
pub fn domain_specs(cfg: &StreamConfig, seed: u64) -> Result<(DomainSpec, DomainSpec)> {
    cfg.validate()?;
    let (v, d) = (cfg.vocab_size, cfg.feat_dim);

    let mut rng = Rng::derive(seed, STREAM_EMBED);
    let mut emb = Tensor::gaussian(&mut rng, &[v, d], 0.0, 1.0)?;
    for row in emb.data_mut().chunks_mut(d) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|x| *x /= n);
    }

    let mut identity = Tensor::zeros(&[d, d]);
    (0..d).for_each(|i| identity.data_mut()[i * d + i] = 1.0);
    let uniform_next: Vec<Vec<f64>> = (0..v)
        .map(|i| (0..v).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
        .collect();
    let general = DomainSpec {
        domain: Domain::General,
        embeddings: emb.clone(),
        channel: identity,
        offset: vec![0.0; d],
        noise_std: cfg.general_noise,
        token_prior: vec![1.0; v],
        transitions: uniform_next,
        frames_per_token: cfg.frames_per_token,
        seq_len: cfg.seq_len,
        balance_mix: 0.5,
    };

    // Q · diag(σ) · Qᵀ with σ log-spaced from 1 down to 1/condition.
    let mut rng = Rng::derive(seed, STREAM_CHANNEL);
    let q = orthogonal(&mut rng, d);
    let mut scaled = q.clone();
    for (i, row) in scaled.data_mut().chunks_mut(d).enumerate() {
        let frac = if d > 1 { i as f64 / (d - 1) as f64 } else { 0.0 };
        let sigma = cfg.target_condition.powf(-frac);
        row.iter_mut().for_each(|x| *x *= sigma);
    }
    let mut channel = q.transpose()?.matmul(&scaled)?;
    if cfg.target_rotation != 0.0 {
        // rotate each plane spanned by consecutive rows of a random basis
        let p = orthogonal(&mut rng, d);
        let mut rot = Tensor::zeros(&[d, d]);
        let (c, s) = (cfg.target_rotation.cos(), cfg.target_rotation.sin());
        for i in 0..d {
            rot.data_mut()[i * d + i] = if i + 1 == d && d % 2 == 1 { 1.0 } else { c };
        }
        for i in (0..d.saturating_sub(1)).step_by(2) {
            rot.data_mut()[i * d + i + 1] = -s;
            rot.data_mut()[(i + 1) * d + i] = s;
        }
        let r = p.transpose()?.matmul(&rot)?.matmul(&p)?;
        channel = r.matmul(&channel)?;
    }
    let mut offset: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
    let n = offset.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    offset.iter_mut().for_each(|x| *x *= cfg.target_offset / n);

    let mut rng = Rng::derive(seed, STREAM_PRIOR);
    let mut order: Vec<usize> = (0..v).collect();
    rng.shuffle(&mut order);
    let favoured = v.div_ceil(3);
    let mut prior = vec![0.0; v];
    for (rank, &t) in order.iter().enumerate() {
        prior[t] = if rank < favoured {
            cfg.target_skew / favoured as f64
        } else {
            (1.0 - cfg.target_skew) / (v - favoured) as f64
        };
    }
    let k = cfg.preferred_successors;
    let mut transitions = Vec::with_capacity(v);
    for i in 0..v {
        let mut others: Vec<usize> = (0..v).filter(|&j| j != i).collect();
        rng.shuffle(&mut others);
        let mut row = vec![0.0; v];
        let rest = others.len() - k;
        for (n, &j) in others.iter().enumerate() {
            row[j] = if n < k {
                cfg.target_bigram_mass / k as f64
            } else if rest > 0 {
                (1.0 - cfg.target_bigram_mass) / rest as f64
            } else {
                0.0
            };
        }
        if row.iter().sum::<f64>() == 0.0 {
            others.iter().for_each(|&j| row[j] = 1.0);
        }
        transitions.push(row);
    }
    let target = DomainSpec {
        domain: Domain::Target,
        embeddings: emb,
        channel,
        offset,
        noise_std: cfg.target_noise,
        token_prior: prior,
        transitions,
        frames_per_token: cfg.frames_per_token,
        seq_len: cfg.seq_len,
        balance_mix: 0.5,
    };
    general.validate()?;
    target.validate()?;
    Ok((general, target))
}

fn jittered(spec: &DomainSpec, std: f64, seed: u64, segment: usize) -> Result<DomainSpec> {
    let mut out = spec.clone();
    if std > 0.0 {
        let mut rng = Rng::derive(seed, STREAM_JITTER + ((segment as u64 + 1) << 8));
        let noise = Tensor::gaussian(&mut rng, spec.channel.shape(), 0.0, std)?;
        out.channel = spec.channel.add(&noise)?;
    }
    Ok(out)
}

/// Segment-specific lexical focus: a random quarter of the vocabulary gets
/// its first-token and successor weights multiplied by `1 + drift`.
fn drifted(spec: &DomainSpec, drift: f64, seed: u64, segment: usize) -> DomainSpec {
    let mut out = spec.clone();
    if drift > 0.0 {
        let v = spec.vocab_size();
        let mut rng = Rng::derive(seed, STREAM_DRIFT + ((segment as u64 + 1) << 8));
        for j in rng.sample_indices(v, v.div_ceil(4)) {
            out.token_prior[j] *= 1.0 + drift;
            out.transitions.iter_mut().for_each(|row| row[j] *= 1.0 + drift);
        }
    }
    out
}

/// Distortion severity of segment `k`: ramps linearly from
/// `severity_start` for the first segment to 1 for the last.
pub fn segment_severity(cfg: &StreamConfig, k: usize) -> f64 {
    if cfg.k_segments <= 1 {
        return 1.0;
    }
    let frac = k as f64 / (cfg.k_segments - 1) as f64;
    cfg.severity_start + (1.0 - cfg.severity_start) * frac
}

/// `(1 − s)·clean + s·target` for channel and offset.
fn blended(target: &DomainSpec, s: f64) -> Result<DomainSpec> {
    let mut out = target.clone();
    if s < 1.0 {
        let d = target.feat_dim();
        let mut c = target.channel.scale(s);
        (0..d).for_each(|i| c.data_mut()[i * d + i] += 1.0 - s);
        out.channel = c;
        out.offset.iter_mut().for_each(|x| *x *= s);
    }
    Ok(out)
}

/// Acoustic and lexical conditions of target segment `k`.
pub fn segment_spec(target: &DomainSpec, cfg: &StreamConfig, seed: u64, k: usize) -> Result<DomainSpec> {
    let spec = blended(target, segment_severity(cfg, k))?;
    Ok(drifted(&jittered(&spec, cfg.segment_jitter, seed, k)?, cfg.segment_drift, seed, k))
}

fn synth_split(spec: &DomainSpec, split: Split, prefix: &str, n: usize, seed: u64, alternate: bool) -> Result<Vec<Utterance>> {
    (0..n)
        .map(|i| {
            let mut rng = Rng::derive(seed, split.stream_base() + i as u64);
            let mut u = synth_utterance(spec, format!("{prefix}-{i:05}"), &mut rng)?;
            if alternate {
                u.balance_attr = if i % 2 == 0 { BalanceAttr::A } else { BalanceAttr::B };
            }
            Ok(u)
        })
        .collect()
}

/// Deterministic dataset: general train/dev, `k_segments` target segments
/// (each with its own channel jitter and lexical focus) and a target dev set
/// drawn per `target_dev_condition`.
pub fn build_stream(cfg: &StreamConfig, seed: u64) -> Result<StreamDataset> {
    let (general, target) = domain_specs(cfg, seed)?;
    let general_train = synth_split(&general, Split::GeneralTrain, "gtr", cfg.general_train, seed, true)?;
    let general_dev = synth_split(&general, Split::GeneralDev, "gdv", cfg.general_dev, seed, true)?;
    let specs: Vec<DomainSpec> = (0..cfg.k_segments)
        .map(|k| segment_spec(&target, cfg, seed, k))
        .collect::<Result<_>>()?;
    let target_segments = specs
        .iter()
        .enumerate()
        .map(|(k, spec)| synth_split(spec, Split::Segment(k), &format!("s{k:02}"), cfg.per_segment, seed, false))
        .collect::<Result<_>>()?;
    let target_dev = (0..cfg.target_dev)
        .map(|i| {
            let mut rng = Rng::derive(seed, Split::TargetDev.stream_base() + i as u64);
            let spec = match cfg.target_dev_condition {
                DevCondition::Final => &specs[specs.len() - 1],
                DevCondition::Cycle => &specs[i % specs.len()],
            };
            synth_utterance(spec, format!("tdv-{i:05}"), &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(StreamDataset {
        seed,
        general_train,
        general_dev,
        target_segments,
        target_dev,
    })
}

pub const STREAM_FORMAT: &str = "anchorstream-stream";
pub const STREAM_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    seed: u64,
    feat_dim: usize,
    vocab_size: usize,
    segments: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    split: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    segment: Option<usize>,
    domain: Domain,
    balance_attr: BalanceAttr,
    frames: usize,
    reference: Vec<usize>,
    feats: Vec<f64>,
}

/// JSON-lines export: a header line, then one utterance per line.
pub fn write_jsonl<W: Write>(ds: &StreamDataset, vocab_size: usize, mut w: W) -> Result<()> {
    let feat_dim = ds.splits().next().map_or(0, |(_, u)| u.feats.cols());
    let header = Header {
        format: STREAM_FORMAT.into(),
        version: STREAM_VERSION,
        seed: ds.seed,
        feat_dim,
        vocab_size,
        segments: ds.target_segments.len(),
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for (split, u) in ds.splits() {
        let (name, segment) = match split {
            Split::GeneralTrain => ("general_train", None),
            Split::GeneralDev => ("general_dev", None),
            Split::Segment(k) => ("segment", Some(k)),
            Split::TargetDev => ("target_dev", None),
        };
        let rec = Record {
            id: u.id.clone(),
            split: name.into(),
            segment,
            domain: u.domain(),
            balance_attr: u.balance_attr,
            frames: u.frames(),
            reference: u.reference.tokens().to_vec(),
            feats: u.feats.data().to_vec(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<StreamDataset> {
    let mut lines = r.lines();
    let first = lines.next().ok_or_else(|| Error::Format("empty stream file".into()))??;
    let header: Header = serde_json::from_str(&first)?;
    if header.format != STREAM_FORMAT || header.version != STREAM_VERSION {
        return Err(Error::Format(format!(
            "expected {STREAM_FORMAT} v{STREAM_VERSION}, got {} v{}",
            header.format, header.version
        )));
    }
    if header.feat_dim == 0 {
        return Err(Error::Format("feat_dim must be positive".into()));
    }
    let mut ds = StreamDataset {
        seed: header.seed,
        general_train: Vec::new(),
        general_dev: Vec::new(),
        target_segments: vec![Vec::new(); header.segments.min(1 << 16)],
        target_dev: Vec::new(),
    };
    let mut seen = HashSet::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Format(format!("line {}: {msg}", n + 2));
        let rec: Record = serde_json::from_str(&line)?;
        if !seen.insert(rec.id.clone()) {
            return Err(bad(format!("duplicate id {}", rec.id)));
        }
        if rec.frames == 0 || rec.feats.len() != rec.frames.saturating_mul(header.feat_dim) {
            return Err(bad(format!("{} feature values for {} frames", rec.feats.len(), rec.frames)));
        }
        let feats = Tensor::from_vec(vec![rec.frames, header.feat_dim], rec.feats).map_err(|e| bad(e.to_string()))?;
        let reference = LabelSeq::new(rec.reference, header.vocab_size).map_err(|e| bad(e.to_string()))?;
        let expected = match rec.split.as_str() {
            "general_train" | "general_dev" => Domain::General,
            "segment" | "target_dev" => Domain::Target,
            other => return Err(bad(format!("unknown split {other:?}"))),
        };
        if rec.domain != expected {
            return Err(bad(format!("split {} holds {:?} data", rec.split, rec.domain)));
        }
        let u = Utterance::new(rec.id, feats, reference, rec.domain, rec.balance_attr);
        match (rec.split.as_str(), rec.segment) {
            ("general_train", None) => ds.general_train.push(u),
            ("general_dev", None) => ds.general_dev.push(u),
            ("target_dev", None) => ds.target_dev.push(u),
            ("segment", Some(k)) if k < ds.target_segments.len() => ds.target_segments[k].push(u),
            _ => return Err(bad("segment index missing, stray or out of range".into())),
        }
    }
    // the trainer needs every split; catch truncated exports here rather than mid-run
    if ds.general_train.is_empty() || ds.general_dev.is_empty() || ds.target_dev.is_empty() {
        return Err(Error::Format("general_train, general_dev and target_dev must all be nonempty".into()));
    }
    if let Some(k) = ds.target_segments.iter().position(|s| s.is_empty()) {
        return Err(Error::Format(format!("segment {k} of {} has no utterances", ds.target_segments.len())));
    }
    if ds.target_segments.is_empty() {
        return Err(Error::Format("stream declares no target segments".into()));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> StreamConfig {
        StreamConfig {
            k_segments: 3,
            per_segment: 20,
            general_train: 30,
            general_dev: 10,
            target_dev: 10,
            ..StreamConfig::default()
        }
    }

    #[test]
    fn noiseless_identity_repeats_embeddings() {
        let (mut g, _) = domain_specs(&StreamConfig::default(), 3).unwrap();
        g.noise_std = 0.0;
        let u = synth_utterance(&g, "x", &mut Rng::new(1)).unwrap();
        let mut f = 0;
        for &t in u.reference.tokens() {
            assert_eq!(u.feats.row(f), g.embeddings.row(t));
            while f < u.frames() && u.feats.row(f) == g.embeddings.row(t) {
                f += 1;
            }
        }
        assert_eq!(f, u.frames());
    }

    #[test]
    fn same_seed_same_utterance() {
        let (_, t) = domain_specs(&StreamConfig::default(), 9).unwrap();
        let a = synth_utterance(&t, "x", &mut Rng::new(4)).unwrap();
        let b = synth_utterance(&t, "x", &mut Rng::new(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sequences_respect_ranges_and_never_repeat() {
        let ds = build_stream(&small(), 5).unwrap();
        for (_, u) in ds.splits() {
            let toks = u.reference.tokens();
            assert!((3..=8).contains(&toks.len()));
            assert!(toks.windows(2).all(|w| w[0] != w[1]));
            assert!(u.frames() >= 2 * toks.len() && u.frames() <= 3 * toks.len());
        }
    }

    fn power_iteration(m: &Tensor) -> f64 {
        let d = m.rows();
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 * 0.1).collect();
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let mut w = vec![0.0; d];
            gemm_nt(&v, m.data(), &mut w, 1, d, d);
            lambda = w.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
            let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            v = w.iter().map(|x| x / n).collect();
        }
        lambda
    }

    #[test]
    fn target_channel_is_ill_conditioned() {
        let (g, t) = domain_specs(&StreamConfig::default(), 1).unwrap();
        let ctc = t.channel.transpose().unwrap().matmul(&t.channel).unwrap();
        let top = power_iteration(&ctc);
        let d = ctc.rows();
        let mut shifted = ctc.scale(-1.0);
        (0..d).for_each(|i| shifted.data_mut()[i * d + i] += top);
        let bottom = top - power_iteration(&shifted);
        let condition = (top / bottom).sqrt();
        assert!(condition >= 10.0, "condition {condition}");
        assert!((condition - 12.5).abs() < 0.1, "condition {condition}");
        let gg = g.channel.transpose().unwrap().matmul(&g.channel).unwrap();
        assert!((power_iteration(&gg) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ids_unique_and_general_balanced() {
        let cfg = StreamConfig::default();
        let ds = build_stream(&cfg, 11).unwrap();
        assert_eq!(ds.target_segments.len(), cfg.k_segments);
        assert!(ds.target_segments.iter().all(|s| s.len() == cfg.per_segment));
        let ids: HashSet<_> = ds.splits().map(|(_, u)| u.id.clone()).collect();
        assert_eq!(ids.len(), ds.len());
        let a = ds.general_train.iter().filter(|u| u.balance_attr == BalanceAttr::A).count() as isize;
        assert!((2 * a - ds.general_train.len() as isize).abs() <= 1);
    }

    #[test]
    fn segments_differ_by_jitter() {
        let cfg = small();
        let (_, base) = domain_specs(&cfg, 2).unwrap();
        let j0 = jittered(&base, cfg.segment_jitter, 2, 0).unwrap();
        let j1 = jittered(&base, cfg.segment_jitter, 2, 1).unwrap();
        assert_ne!(j0.channel, j1.channel);
        let diff = j0.channel.sub(&base.channel).unwrap();
        let rms = diff.l2_norm() / (diff.len() as f64).sqrt();
        assert!((rms - 0.05).abs() < 0.015, "rms {rms}");
        assert_eq!(jittered(&base, 0.0, 2, 0).unwrap().channel, base.channel);
    }

    #[test]
    fn jsonl_round_trip_is_byte_exact() {
        let ds = build_stream(&small(), 8).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&ds, 16, &mut buf).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        let mut again = Vec::new();
        write_jsonl(&back, 16, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn jsonl_rejects_damage() {
        let ds = build_stream(&small(), 8).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&ds, 16, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let dup = format!("{text}{}\n", text.lines().nth(1).unwrap());
        assert!(read_jsonl(dup.as_bytes()).is_err());
        let wrong_domain = text.replacen("\"domain\":\"general\"", "\"domain\":\"target\"", 1);
        assert!(read_jsonl(wrong_domain.as_bytes()).is_err());
        assert!(read_jsonl("".as_bytes()).is_err());
        let bad_version = text.replacen("\"version\":1", "\"version\":2", 1);
        assert!(read_jsonl(bad_version.as_bytes()).is_err());
        let header_only = text.lines().next().unwrap();
        assert!(read_jsonl(header_only.as_bytes()).is_err());
        let no_last_segment: String = text.lines().filter(|l| !l.contains("\"segment\":2")).map(|l| format!("{l}\n")).collect();
        assert!(read_jsonl(no_last_segment.as_bytes()).is_err());
    }
}
