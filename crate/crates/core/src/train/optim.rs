use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    /// Linear warmup factor `min(1, t / warmup_steps)` for 1-based step `t`.
    pub fn warmup_factor(&self, t: u64) -> f64 {
        if self.warmup_steps == 0 {
            1.0
        } else {
            (t as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// First/second moments aligned with the parameter vector, and the step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        OptimizerState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One decoupled-weight-decay Adam step with bias correction. A non-finite
/// gradient aborts before any state is touched.
pub fn adamw_step(opt: &mut OptimizerState, theta: &mut [f64], grad: &[f64], hp: &AdamW) -> Result<()> {
    if theta.len() != grad.len() || opt.m.len() != theta.len() || opt.v.len() != theta.len() {
        return Err(Error::shape(format!(
            "adamw: parameters {}, gradient {}, moments {}/{}",
            theta.len(),
            grad.len(),
            opt.m.len(),
            opt.v.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::GradientExplosion { norm: l2(grad) });
    }
    opt.t += 1;
    let t = opt.t as i32;
    let lr = hp.lr * hp.warmup_factor(opt.t);
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for i in 0..theta.len() {
        let g = grad[i];
        opt.m[i] = hp.beta1 * opt.m[i] + (1.0 - hp.beta1) * g;
        opt.v[i] = hp.beta2 * opt.v[i] + (1.0 - hp.beta2) * g * g;
        let mhat = opt.m[i] / c1;
        let vhat = opt.v[i] / c2;
        theta[i] -= lr * (mhat / (vhat.sqrt() + hp.eps) + hp.weight_decay * theta[i]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(wd: f64, warmup: usize) -> AdamW {
        AdamW {
            lr: 3e-4,
            weight_decay: wd,
            warmup_steps: warmup,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut theta = vec![0.3, -1.2];
        let mut opt = OptimizerState::new(2);
        for _ in 0..5 {
            adamw_step(&mut opt, &mut theta, &[0.0, 0.0], &hp(0.0, 10)).unwrap();
        }
        assert_eq!(theta, vec![0.3, -1.2]);
        assert_eq!(opt.t, 5);
    }

    #[test]
    fn first_step_closed_form() {
        for g in [2.5, -0.01, 1e-3] {
            let mut theta = vec![1.0];
            let mut opt = OptimizerState::new(1);
            let h = hp(0.0, 0);
            adamw_step(&mut opt, &mut theta, &[g], &h).unwrap();
            let expect = 1.0 - h.lr * g / (g.abs() + h.eps);
            assert!((theta[0] - expect).abs() < 1e-15, "{g}");
        }
    }

    #[test]
    fn warmup_halfway() {
        let h = hp(0.0, 10);
        assert_eq!(h.warmup_factor(5), 0.5);
        assert_eq!(h.warmup_factor(10), 1.0);
        assert_eq!(h.warmup_factor(250), 1.0);
        // fifth step moves by exactly half of lr on a constant unit gradient
        let mut theta = vec![0.0];
        let mut opt = OptimizerState::new(1);
        let mut prev = 0.0;
        for step in 1..=5 {
            adamw_step(&mut opt, &mut theta, &[1.0], &h).unwrap();
            if step == 5 {
                let moved = prev - theta[0];
                assert!((moved - 0.5 * h.lr / (1.0 + h.eps)).abs() < 1e-15);
            }
            prev = theta[0];
        }
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut theta = vec![2.0];
        let mut opt = OptimizerState::new(1);
        let h = hp(0.01, 0);
        adamw_step(&mut opt, &mut theta, &[0.0], &h).unwrap();
        assert!((theta[0] - 2.0 * (1.0 - h.lr * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut theta = vec![1.0, 1.0];
        let mut opt = OptimizerState::new(2);
        let err = adamw_step(&mut opt, &mut theta, &[f64::NAN, 1.0], &hp(0.0, 0)).unwrap_err();
        assert!(matches!(err, Error::GradientExplosion { .. }));
        assert_eq!(theta, vec![1.0, 1.0]);
        assert_eq!(opt, OptimizerState::new(2));
        assert!(adamw_step(&mut opt, &mut theta, &[1.0], &hp(0.0, 0)).is_err());
    }
}
