use super::LabelSeq;
use crate::error::{Error, Result};
use crate::tensor::{log_add, Tensor};

/// Fewest frames that can emit `labels`: one per label plus a blank between repeats.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `y` under CTC and its gradient with respect to
/// the logits that produced `log_probs` through a row-wise log-softmax.
///
/// Runs the forward–backward recursions in log space over the blank-expanded
/// label sequence.
pub fn ctc_loss(log_probs: &Tensor, y: &LabelSeq) -> Result<(f64, Tensor)> {
    let shape = log_probs.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::shape(format!(
            "log-probabilities must be [T x (V+1)] with V >= 1, got {shape:?}"
        )));
    }
    let (t_len, n_out) = (shape[0], shape[1]);
    let blank = n_out - 1;
    let labels = y.tokens();
    if let Some(&bad) = labels.iter().find(|&&l| l >= blank) {
        return Err(Error::domain(format!("label {bad} collides with blank index {blank}")));
    }
    let required = min_frames(labels);
    if t_len < required.max(1) {
        return Err(Error::InfeasibleAlignment {
            labels: labels.len(),
            required: required.max(1),
            frames: t_len,
        });
    }

    let s_len = 2 * labels.len() + 1;
    let ext: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 0 { blank } else { labels[s / 2] })
        .collect();
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let lp = |t: usize, s: usize| log_probs.data()[t * n_out + ext[s]];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, prev[s - 2]);
            }
            cur[s] = if a == ninf { ninf } else { a + lp(t, s) };
        }
    }

    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lp(t_len - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, s_len - 2);
    }
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        let next = &next[..s_len];
        for s in 0..s_len {
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            cur[s] = if b == ninf { ninf } else { b + lp(t, s) };
        }
    }

    let end = &alpha[last..];
    let log_p = if s_len > 1 {
        log_add(end[s_len - 1], end[s_len - 2])
    } else {
        end[0]
    };
    if !log_p.is_finite() {
        return Err(Error::InfeasibleAlignment {
            labels: labels.len(),
            required,
            frames: t_len,
        });
    }

    let mut grad = vec![0.0; t_len * n_out];
    for t in 0..t_len {
        let row = &mut grad[t * n_out..(t + 1) * n_out];
        for (k, g) in row.iter_mut().enumerate() {
            *g = log_probs.data()[t * n_out + k].exp();
        }
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            row[ext[s]] -= (a + b - lp(t, s) - log_p).exp();
        }
    }
    Ok((-log_p, Tensor::from_vec(vec![t_len, n_out], grad)?))
}
