use serde::{Deserialize, Serialize};

use super::utterance::{BalanceAttr, Domain, Utterance};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dual-source replay memory: a balanced general-domain anchor pool and a
/// loss-prioritized window of target-domain history.
#[derive(Clone, Debug, Default)]
pub struct ReplayBuffer {
    pub general: Vec<Utterance>,
    pub target: Vec<Utterance>,
    pub cap_general: usize,
    pub cap_target: usize,
    pub hard_fraction: f64,
    pub tau: f64,
}

impl ReplayBuffer {
    pub fn new(cap_general: usize, cap_target: usize, hard_fraction: f64, tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&hard_fraction) {
            return Err(Error::domain(format!("hard_fraction {hard_fraction} outside [0, 1]")));
        }
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(Error::domain(format!("tau {tau} must be finite and nonnegative")));
        }
        Ok(ReplayBuffer {
            cap_general,
            cap_target,
            hard_fraction,
            tau,
            ..ReplayBuffer::default()
        })
    }

    pub fn len(&self) -> usize {
        self.general.len() + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entry `i` of the concatenation `general ++ target`.
    pub fn entry(&self, i: usize) -> &Utterance {
        if i < self.general.len() {
            &self.general[i]
        } else {
            &self.target[i - self.general.len()]
        }
    }

    /// Replace the general pool with a fresh random draw, split evenly over
    /// the balance attribute (the odd slot goes to `A`).
    pub fn refill_general(&mut self, pool: &[Utterance], rng: &mut Rng) {
        if self.cap_general == 0 {
            self.general.clear();
            return;
        }
        let by_attr = |a: BalanceAttr| -> Vec<&Utterance> {
            pool.iter()
                .filter(|u| u.domain() == Domain::General && u.balance_attr == a)
                .collect()
        };
        let (pa, pb) = (by_attr(BalanceAttr::A), by_attr(BalanceAttr::B));
        let mut want_a = self.cap_general.div_ceil(2);
        let mut want_b = self.cap_general / 2;
        // keep |A| - |B| within one when an attribute runs short
        want_a = want_a.min(pa.len()).min(pb.len() + 1);
        want_b = want_b.min(pb.len()).min(want_a);
        want_a = want_a.min(want_b + 1);
        let mut picked = Vec::with_capacity(want_a + want_b);
        for i in rng.sample_indices(pa.len(), want_a) {
            picked.push(pa[i].clone());
        }
        for i in rng.sample_indices(pb.len(), want_b) {
            picked.push(pb[i].clone());
        }
        self.general = picked;
    }

    /// Hard-example mining over the finished segment plus the current target
    /// history. Every candidate must carry `last_loss`. Returns the ids picked
    /// as hard, in selection order.
    pub fn update(
        &mut self,
        segment: &[Utterance],
        general_pool: &[Utterance],
        rng: &mut Rng,
    ) -> Result<Vec<String>> {
        let mut candidates: Vec<Utterance> = Vec::with_capacity(segment.len() + self.target.len());
        candidates.extend(segment.iter().cloned());
        candidates.append(&mut self.target);
        if let Some(u) = candidates.iter().find(|u| u.domain() != Domain::Target) {
            return Err(Error::domain(format!("utterance {} is not target-domain", u.id)));
        }
        let losses: Vec<f64> = candidates
            .iter()
            .map(|u| {
                u.last_loss
                    .filter(|l| l.is_finite())
                    .ok_or_else(|| Error::domain(format!("utterance {} has no instance loss", u.id)))
            })
            .collect::<Result<_>>()?;

        let keep = self.cap_target.min(candidates.len());
        let mut hard_ids = Vec::new();
        if keep > 0 {
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            let threshold = self.tau * mean;
            let mut hard: Vec<usize> = (0..candidates.len()).filter(|&i| losses[i] > threshold).collect();
            hard.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
            let n_hard = ((self.hard_fraction * keep as f64).round() as usize).min(hard.len());
            let mut chosen: Vec<usize> = hard[..n_hard].to_vec();
            let mut taken = vec![false; candidates.len()];
            chosen.iter().for_each(|&i| taken[i] = true);
            let rest: Vec<usize> = (0..candidates.len()).filter(|&i| !taken[i]).collect();
            for j in rng.sample_indices(rest.len(), keep - n_hard) {
                chosen.push(rest[j]);
            }
            hard_ids = chosen[..n_hard].iter().map(|&i| candidates[i].id.clone()).collect();
            let mut slots: Vec<Option<Utterance>> = candidates.into_iter().map(Some).collect();
            self.target = chosen.iter().map(|&i| slots[i].take().expect("distinct picks")).collect();
        }
        self.refill_general(general_pool, rng);
        Ok(hard_ids)
    }

    pub fn snapshot(&self) -> BufferSnapshot {
        let entry = |u: &Utterance| SnapshotEntry {
            id: u.id.clone(),
            domain: u.domain(),
            balance_attr: u.balance_attr,
            last_loss: u.last_loss,
        };
        BufferSnapshot {
            format: SNAPSHOT_FORMAT.to_string(),
            cap_general: self.cap_general,
            cap_target: self.cap_target,
            hard_fraction: self.hard_fraction,
            tau: self.tau,
            general: self.general.iter().map(entry).collect(),
            target: self.target.iter().map(entry).collect(),
        }
    }
}

pub const SNAPSHOT_FORMAT: &str = "anchorstream-buffer-v1";

/// Audit record of buffer contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferSnapshot {
    pub format: String,
    pub cap_general: usize,
    pub cap_target: usize,
    pub hard_fraction: f64,
    pub tau: f64,
    pub general: Vec<SnapshotEntry>,
    pub target: Vec<SnapshotEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotEntry {
    pub id: String,
    pub domain: Domain,
    pub balance_attr: BalanceAttr,
    pub last_loss: Option<f64>,
}

impl BufferSnapshot {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a snapshot and checks the buffer invariants it records.
    pub fn from_json(s: &str) -> Result<Self> {
        let snap: BufferSnapshot = serde_json::from_str(s)?;
        if snap.format != SNAPSHOT_FORMAT {
            return Err(Error::Format(format!("expected {SNAPSHOT_FORMAT}, got {}", snap.format)));
        }
        if snap.general.len() > snap.cap_general || snap.target.len() > snap.cap_target {
            return Err(Error::Format("snapshot exceeds its capacities".into()));
        }
        if snap.general.iter().any(|e| e.domain != Domain::General)
            || snap.target.iter().any(|e| e.domain != Domain::Target)
        {
            return Err(Error::Format("snapshot pools mix domains".into()));
        }
        Ok(snap)
    }
}

/// `n` entries drawn uniformly from the union of both pools, without
/// replacement while the buffer lasts.
pub fn sample_buffer<'a>(buf: &'a ReplayBuffer, n: usize, rng: &mut Rng) -> Vec<&'a Utterance> {
    let total = buf.len();
    if total == 0 || n == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let want = (n - out.len()).min(total);
        out.extend(rng.sample_indices(total, want).into_iter().map(|i| buf.entry(i)));
    }
    out
}

/// Batch with `round(γ·batch_size)` stream draws and the remainder from the
/// buffer; all-stream when the buffer is empty.
pub fn mixed_batch<'a>(
    stream: &'a [Utterance],
    buf: &'a ReplayBuffer,
    batch_size: usize,
    gamma: f64,
    rng: &mut Rng,
) -> Result<Vec<&'a Utterance>> {
    if stream.is_empty() {
        return Err(Error::domain("mixed_batch needs a nonempty stream"));
    }
    if batch_size == 0 {
        return Err(Error::domain("batch_size must be at least 1"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::domain(format!("gamma {gamma} outside [0, 1]")));
    }
    let n_stream = if buf.is_empty() {
        batch_size
    } else {
        (gamma * batch_size as f64).round() as usize
    };
    let mut out = Vec::with_capacity(batch_size);
    while out.len() < n_stream {
        let want = (n_stream - out.len()).min(stream.len());
        out.extend(rng.sample_indices(stream.len(), want).into_iter().map(|i| &stream[i]));
    }
    out.extend(sample_buffer(buf, batch_size - n_stream, rng));
    Ok(out)
}
