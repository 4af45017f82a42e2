use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GradientSet;

/// Consolidated importance `F`, anchor `θ*`, segment count `k` and strength `λ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherState {
    pub importance: Vec<f64>,
    pub anchor: Vec<f64>,
    pub segments: usize,
    pub lambda: f64,
}

impl FisherState {
    /// `F = 0`, `k = 0`; the anchor starts at the initial adapter vector.
    pub fn new(theta0: &[f64], lambda: f64) -> Self {
        FisherState {
            importance: vec![0.0; theta0.len()],
            anchor: theta0.to_vec(),
            segments: 0,
            lambda,
        }
    }

    /// Segment-wise running mean of importance and a fresh copy of `θ` as anchor.
    pub fn consolidate(&mut self, f_new: &[f64], theta_now: &[f64]) -> Result<()> {
        if f_new.len() != self.importance.len() || theta_now.len() != self.anchor.len() {
            return Err(Error::shape(format!(
                "consolidate expects length {}, got importance {} and parameters {}",
                self.importance.len(),
                f_new.len(),
                theta_now.len()
            )));
        }
        if let Some(bad) = f_new.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::domain(format!("importance entry {bad} is not a finite nonnegative value")));
        }
        self.segments += 1;
        let k = self.segments as f64;
        for (f, &n) in self.importance.iter_mut().zip(f_new) {
            *f = (*f * (k - 1.0) + n) / k;
        }
        self.anchor = theta_now.to_vec();
        Ok(())
    }

    /// `(λ/2)·Σ F_i (θ_i − θ*_i)²` and its gradient `λ·F⊙(θ − θ*)`.
    pub fn penalty(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        if theta.len() != self.anchor.len() {
            return Err(Error::shape(format!(
                "penalty expects {} parameters, got {}",
                self.anchor.len(),
                theta.len()
            )));
        }
        if self.segments == 0 {
            return Ok((0.0, vec![0.0; theta.len()]));
        }
        let mut loss = 0.0;
        let grad = theta
            .iter()
            .zip(&self.anchor)
            .zip(&self.importance)
            .map(|((&t, &a), &f)| {
                let d = t - a;
                loss += f * d * d;
                self.lambda * f * d
            })
            .collect();
        Ok((0.5 * self.lambda * loss, grad))
    }
}

/// Streaming `(1/N)·Σ_j |g_j|`.
#[derive(Clone, Debug)]
pub struct AbsFisherAccumulator {
    sum: Vec<f64>,
    count: usize,
}

impl AbsFisherAccumulator {
    pub fn new(len: usize) -> Self {
        AbsFisherAccumulator {
            sum: vec![0.0; len],
            count: 0,
        }
    }

    pub fn add(&mut self, grad: &[f64]) -> Result<()> {
        if grad.len() != self.sum.len() {
            return Err(Error::shape(format!(
                "per-sample gradient has {} entries, expected {}",
                grad.len(),
                self.sum.len()
            )));
        }
        for (s, g) in self.sum.iter_mut().zip(grad) {
            *s += g.abs();
        }
        self.count += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::domain("absolute Fisher needs at least one sample"));
        }
        let n = self.count as f64;
        Ok(self.sum.into_iter().map(|s| s / n).collect())
    }
}

/// Mean absolute per-sample adapter gradient, in `flatten_trainable` order.
pub fn abs_fisher(grads_per_sample: &[GradientSet]) -> Result<Vec<f64>> {
    let first = grads_per_sample
        .first()
        .ok_or_else(|| Error::domain("absolute Fisher needs at least one sample"))?;
    let mut acc = AbsFisherAccumulator::new(first.flat_adapters().len());
    for g in grads_per_sample {
        acc.add(&g.flat_adapters())?;
    }
    acc.finish()
}
