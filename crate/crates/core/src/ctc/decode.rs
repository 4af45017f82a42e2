use std::collections::BTreeMap;

use super::lm::CharNgramLM;
use super::LabelSeq;
use crate::error::{Error, Result};
use crate::tensor::{argmax, log_add, Tensor};

/// Per-frame argmax, collapse repeats, drop blanks. Lowest index wins ties.
pub fn greedy_decode(log_probs: &Tensor) -> LabelSeq {
    let blank = log_probs.cols() - 1;
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..log_probs.rows() {
        let k = argmax(log_probs.row(t));
        if k != blank && prev != Some(k) {
            out.push(k);
        }
        prev = Some(k);
    }
    LabelSeq(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub lm_weight: f64,
    pub word_bonus: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_width: 8,
            lm_weight: 0.5,
            word_bonus: 0.0,
        }
    }
}

#[derive(Clone, Copy)]
struct Scores {
    blank: f64,
    non_blank: f64,
}

impl Scores {
    const EMPTY: Scores = Scores {
        blank: f64::NEG_INFINITY,
        non_blank: f64::NEG_INFINITY,
    };

    fn total(self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

/// CTC prefix beam search with optional n-gram shallow fusion.
///
/// A prefix is ranked by `log P_acoustic + lm_weight·log P_lm + word_bonus·|prefix|`;
/// the language model term is folded in whenever a prefix is extended and the
/// end-of-sentence probability is added before the final choice.
pub fn beam_decode(
    log_probs: &Tensor,
    cfg: &BeamConfig,
    lm: Option<&CharNgramLM>,
) -> Result<LabelSeq> {
    if cfg.beam_width < 1 {
        return Err(Error::domain("beam_width must be at least 1"));
    }
    let n_out = log_probs.cols();
    let blank = n_out - 1;
    let lm = lm.filter(|_| cfg.lm_weight != 0.0);
    let lm_term = |prefix: &[usize], next: Option<usize>| -> f64 {
        lm.map_or(0.0, |m| cfg.lm_weight * m.log_prob(prefix, next))
    };
    let rank = |prefix: &[usize], s: Scores| s.total() + cfg.word_bonus * prefix.len() as f64;

    let mut beam: Vec<(Vec<usize>, Scores)> = vec![(
        Vec::new(),
        Scores {
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
        },
    )];
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let mut next: BTreeMap<Vec<usize>, Scores> = BTreeMap::new();
        for (prefix, s) in &beam {
            let total = s.total();
            let e = next.entry(prefix.clone()).or_insert(Scores::EMPTY);
            e.blank = log_add(e.blank, total + row[blank]);
            for (c, &p) in row.iter().enumerate().take(blank) {
                let mut ext = prefix.clone();
                ext.push(c);
                if prefix.last() == Some(&c) {
                    let same = next.entry(prefix.clone()).or_insert(Scores::EMPTY);
                    same.non_blank = log_add(same.non_blank, s.non_blank + p);
                    let fused = s.blank + p + lm_term(prefix, Some(c));
                    let e = next.entry(ext).or_insert(Scores::EMPTY);
                    e.non_blank = log_add(e.non_blank, fused);
                } else {
                    let fused = total + p + lm_term(prefix, Some(c));
                    let e = next.entry(ext).or_insert(Scores::EMPTY);
                    e.non_blank = log_add(e.non_blank, fused);
                }
            }
        }
        let mut cands: Vec<(Vec<usize>, Scores)> = next
            .into_iter()
            .filter(|(_, s)| s.total() > f64::NEG_INFINITY)
            .collect();
        // BTreeMap order is lexicographic, so a stable sort keeps the lowest
        // token sequence first among exact ties.
        cands.sort_by(|a, b| rank(&b.0, b.1).total_cmp(&rank(&a.0, a.1)));
        cands.truncate(cfg.beam_width);
        beam = cands;
    }
    let best = beam
        .into_iter()
        .map(|(p, s)| {
            let score = rank(&p, s) + lm_term(&p, None);
            (p, score)
        })
        .fold(None::<(Vec<usize>, f64)>, |acc, (p, sc)| match acc {
            Some((bp, bs)) if bs >= sc => Some((bp, bs)),
            _ => Some((p, sc)),
        });
    Ok(LabelSeq(best.map(|(p, _)| p).unwrap_or_default()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::train_lm;
    use crate::oracle::brute_force_sequence_posteriors;
    use crate::rng::Rng;

    fn lp_from_argmax(frames: &[usize], n_out: usize) -> Tensor {
        let rows: Vec<Vec<f64>> = frames
            .iter()
            .map(|&k| (0..n_out).map(|j| if j == k { 5.0 } else { 0.0 }).collect())
            .collect();
        Tensor::from_rows(&rows).log_softmax_rows().unwrap()
    }

    #[test]
    fn greedy_collapse_rules() {
        // blank = 2
        assert_eq!(greedy_decode(&lp_from_argmax(&[2, 0, 0, 2, 1], 3)).0, vec![0, 1]);
        assert!(greedy_decode(&lp_from_argmax(&[2, 2, 2], 3)).is_empty());
        assert_eq!(greedy_decode(&lp_from_argmax(&[0, 2, 0], 3)).0, vec![0, 0]);
    }

    #[test]
    fn greedy_ties_prefer_lowest_index() {
        let lp = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).log_softmax_rows().unwrap();
        assert_eq!(greedy_decode(&lp).0, vec![0]);
    }

    #[test]
    fn width_one_matches_greedy_on_peaked_input() {
        let lp = lp_from_argmax(&[3, 0, 0, 3, 1, 2, 2, 3], 4);
        let cfg = BeamConfig {
            beam_width: 1,
            lm_weight: 0.0,
            word_bonus: 0.0,
        };
        assert_eq!(beam_decode(&lp, &cfg, None).unwrap(), greedy_decode(&lp));
    }

    #[test]
    fn zero_width_rejected() {
        let lp = lp_from_argmax(&[0], 2);
        let cfg = BeamConfig {
            beam_width: 0,
            ..BeamConfig::default()
        };
        assert!(beam_decode(&lp, &cfg, None).is_err());
    }

    #[test]
    fn exhaustive_beam_finds_max_posterior() {
        let mut rng = Rng::new(21);
        for _ in 0..20 {
            let lp = Tensor::gaussian(&mut rng, &[4, 3], 0.0, 1.0)
                .unwrap()
                .log_softmax_rows()
                .unwrap();
            let post = brute_force_sequence_posteriors(&lp);
            let best = post
                .iter()
                .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
                .unwrap();
            let cfg = BeamConfig {
                beam_width: 3usize.pow(4),
                lm_weight: 0.0,
                word_bonus: 0.0,
            };
            assert_eq!(beam_decode(&lp, &cfg, None).unwrap().0, best.0);
        }
    }

    #[test]
    fn lm_weight_zero_ignores_lm() {
        let mut rng = Rng::new(8);
        let lp = Tensor::gaussian(&mut rng, &[6, 4], 0.0, 1.0)
            .unwrap()
            .log_softmax_rows()
            .unwrap();
        let lm_a = train_lm(&[LabelSeq(vec![0, 1, 2])], 2, 0.1, 3).unwrap();
        let lm_b = train_lm(&[LabelSeq(vec![2, 2, 2, 1])], 3, 1.0, 3).unwrap();
        let cfg = BeamConfig {
            beam_width: 4,
            lm_weight: 0.0,
            word_bonus: 0.0,
        };
        let a = beam_decode(&lp, &cfg, Some(&lm_a)).unwrap();
        let b = beam_decode(&lp, &cfg, Some(&lm_b)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, beam_decode(&lp, &cfg, None).unwrap());
    }

    #[test]
    fn lm_resolves_two_frame_ambiguity() {
        // V = 2 (a=0, b=1), blank = 2. Frame 0 is clearly "a"; frame 1 slightly
        // prefers blank over "b", so greedy yields "a".
        let lp = Tensor::from_rows(&[
            vec![0.8f64.ln(), 0.1f64.ln(), 0.1f64.ln()],
            vec![0.05f64.ln(), 0.45f64.ln(), 0.5f64.ln()],
        ]);
        assert_eq!(greedy_decode(&lp).0, vec![0]);
        let corpus = vec![LabelSeq(vec![0, 1]); 20];
        let lm = train_lm(&corpus, 2, 0.01, 2).unwrap();
        let cfg = BeamConfig {
            beam_width: 9,
            lm_weight: 1.0,
            word_bonus: 0.0,
        };
        // exhaustive fused scoring over every candidate reachable in two frames
        let post = brute_force_sequence_posteriors(&lp);
        let fused = |seq: &[usize], logp: f64| {
            let mut s = logp;
            for i in 0..seq.len() {
                s += lm.log_prob(&seq[..i], Some(seq[i]));
            }
            s + lm.log_prob(seq, None)
        };
        let best = post
            .iter()
            .max_by(|a, b| fused(&a.0, a.1).total_cmp(&fused(&b.0, b.1)))
            .unwrap();
        assert_eq!(best.0, vec![0, 1]);
        assert_eq!(beam_decode(&lp, &cfg, Some(&lm)).unwrap().0, vec![0, 1]);
    }
}
