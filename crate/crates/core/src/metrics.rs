//! Edit-distance error rates, forgetting and Pareto summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimal Levenshtein operation counts against a reference of length `reference_len`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOps {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_len: usize,
}

impl EditOps {
    pub fn cost(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Unpooled rate for one pair; `None` for an empty reference.
    pub fn rate(&self) -> Option<f64> {
        (self.reference_len > 0).then(|| self.cost() as f64 / self.reference_len as f64)
    }
}

impl std::ops::AddAssign for EditOps {
    fn add_assign(&mut self, o: EditOps) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.reference_len += o.reference_len;
    }
}

/// Unit-cost Levenshtein alignment. Among minimal-cost alignments the one
/// with the most substitutions is kept, so counts are symmetric under swapping
/// reference and hypothesis; remaining ties in the backtrace prefer the
/// diagonal, then deletion, then insertion.
pub fn edit_ops<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditOps {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    // (cost, -substitutions): lexicographic minimum
    let mut dp = vec![(0usize, 0isize); (n + 1) * w];
    for i in 0..=n {
        dp[i * w] = (i, 0);
    }
    for j in 0..=m {
        dp[j] = (j, 0);
    }
    let diag = |dp: &[(usize, isize)], i: usize, j: usize| {
        let (c, s) = dp[(i - 1) * w + j - 1];
        if reference[i - 1] == hypothesis[j - 1] {
            (c, s)
        } else {
            (c + 1, s - 1)
        }
    };
    for i in 1..=n {
        for j in 1..=m {
            let sub = diag(&dp, i, j);
            let (dc, ds) = dp[(i - 1) * w + j];
            let (ic, is) = dp[i * w + j - 1];
            dp[i * w + j] = sub.min((dc + 1, ds)).min((ic + 1, is));
        }
    }
    let mut ops = EditOps {
        reference_len: n,
        ..EditOps::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 && diag(&dp, i, j) == here {
            if reference[i - 1] != hypothesis[j - 1] {
                ops.substitutions += 1;
            }
            i -= 1;
            j -= 1;
            continue;
        }
        if i > 0 {
            let (dc, ds) = dp[(i - 1) * w + j];
            if (dc + 1, ds) == here {
                ops.deletions += 1;
                i -= 1;
                continue;
            }
        }
        ops.insertions += 1;
        j -= 1;
    }
    ops
}

/// Granularity at which a corpus rate is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RateLevel {
    /// Tokens are the words of the synthetic task.
    Word,
    /// Each token expands to two symbols, see [`token_chars`].
    Character,
}

/// Symbol pair `(t div 4, t mod 4)` standing in for a token's spelling.
pub fn token_chars(tokens: &[usize]) -> Vec<usize> {
    tokens.iter().flat_map(|&t| [t / 4, t % 4]).collect()
}

/// Pooled error rate in percent: `100·Σ(S+D+I) / ΣN`.
pub fn corpus_rate<R: AsRef<[usize]>, H: AsRef<[usize]>>(
    pairs: &[(R, H)],
    level: RateLevel,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::domain("corpus_rate needs at least one pair"));
    }
    let mut total = EditOps::default();
    for (r, h) in pairs {
        total += match level {
            RateLevel::Word => edit_ops(r.as_ref(), h.as_ref()),
            RateLevel::Character => edit_ops(&token_chars(r.as_ref()), &token_chars(h.as_ref())),
        };
    }
    if total.reference_len == 0 {
        return Err(Error::UndefinedRate);
    }
    Ok(100.0 * total.cost() as f64 / total.reference_len as f64)
}

/// Absolute change in general-domain WER, in percentage points.
pub fn forgetting(baseline_general_wer: f64, current_general_wer: f64) -> f64 {
    current_general_wer - baseline_general_wer
}

/// Relative improvement in percent: `100·(baseline − final)/baseline`.
pub fn relative_improvement(baseline: f64, final_rate: f64) -> f64 {
    if baseline == 0.0 {
        return 0.0;
    }
    100.0 * (baseline - final_rate) / baseline
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub paradigm: String,
    pub final_target_wer: f64,
    pub improvement_pct: f64,
    pub final_general_wer: f64,
    pub forgetting: f64,
}

/// Final-segment numbers per paradigm, in input order.
pub struct ParadigmOutcome<'a> {
    pub paradigm: &'a str,
    pub baseline_target_wer: f64,
    pub baseline_general_wer: f64,
    pub final_target_wer: f64,
    pub final_general_wer: f64,
}

pub fn pareto_summary(outcomes: &[ParadigmOutcome<'_>]) -> Vec<ParetoRow> {
    outcomes
        .iter()
        .map(|o| ParetoRow {
            paradigm: o.paradigm.to_string(),
            final_target_wer: o.final_target_wer,
            improvement_pct: relative_improvement(o.baseline_target_wer, o.final_target_wer),
            final_general_wer: o.final_general_wer,
            forgetting: forgetting(o.baseline_general_wer, o.final_general_wer),
        })
        .collect()
}

pub fn pareto_csv(rows: &[ParetoRow]) -> String {
    let mut s = String::from("paradigm,final_target_wer,improvement_pct,final_general_wer,forgetting\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4}\n",
            r.paradigm, r.final_target_wer, r.improvement_pct, r.final_general_wer, r.forgetting
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::brute_force_edit_cost;
    use proptest::prelude::*;

    #[test]
    fn single_substitution_and_deletion() {
        let ops = edit_ops(&[0, 1, 2], &[0, 9, 2]);
        assert_eq!((ops.substitutions, ops.deletions, ops.insertions), (1, 0, 0));
        assert!((ops.rate().unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let ops = edit_ops(&[0], &[]);
        assert_eq!(ops.deletions, 1);
        assert_eq!(ops.rate(), Some(1.0));
        assert_eq!(edit_ops::<usize>(&[], &[4, 5]).insertions, 2);
    }

    #[test]
    fn tie_prefers_substitution() {
        // "ab" -> "ba": two substitutions or one deletion + one insertion both cost 2
        let ops = edit_ops(&[0, 1], &[1, 0]);
        assert_eq!((ops.substitutions, ops.deletions, ops.insertions), (2, 0, 0));
    }

    #[test]
    fn pooled_rate_not_mean_of_rates() {
        let pairs = vec![(vec![1, 2, 3, 4], vec![1, 2, 3, 5]), (vec![7], vec![])];
        let r = corpus_rate(&pairs, RateLevel::Word).unwrap();
        assert!((r - 40.0).abs() < 1e-12);
    }

    #[test]
    fn corpus_rate_edge_cases() {
        let perfect = vec![(vec![1, 2], vec![1, 2]), (vec![3], vec![3])];
        assert_eq!(corpus_rate(&perfect, RateLevel::Word).unwrap(), 0.0);
        let single = vec![(vec![1, 2, 3], vec![1, 3])];
        assert!((corpus_rate(&single, RateLevel::Word).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        let empty: Vec<(Vec<usize>, Vec<usize>)> = vec![(vec![], vec![1])];
        assert!(matches!(corpus_rate(&empty, RateLevel::Word), Err(Error::UndefinedRate)));
        let none: Vec<(Vec<usize>, Vec<usize>)> = vec![];
        assert!(corpus_rate(&none, RateLevel::Word).is_err());
    }

    #[test]
    fn character_level_is_finer() {
        // tokens 5=(1,1) and 6=(1,2) share their first symbol
        let pairs = vec![(vec![5], vec![6])];
        assert_eq!(corpus_rate(&pairs, RateLevel::Word).unwrap(), 100.0);
        assert_eq!(corpus_rate(&pairs, RateLevel::Character).unwrap(), 50.0);
    }

    #[test]
    fn forgetting_values() {
        assert!((forgetting(11.57, 17.50) - 5.93).abs() < 1e-9);
        assert!((forgetting(11.57, 14.23) - 2.66).abs() < 1e-9);
        assert_eq!(forgetting(12.0, 12.0), 0.0);
    }

    #[test]
    fn relative_improvement_values() {
        let row = |f: f64| {
            pareto_summary(&[ParadigmOutcome {
                paradigm: "x",
                baseline_target_wer: 40.94,
                baseline_general_wer: 11.57,
                final_target_wer: f,
                final_general_wer: 14.23,
            }])[0]
                .improvement_pct
        };
        assert!((row(33.94) - 17.1).abs() < 0.05);
        assert!((row(34.00) - 17.0).abs() < 0.05);
        assert_eq!(row(40.94), 0.0);
    }

    fn seq() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..3, 0..=6)
    }

    proptest! {
        #[test]
        fn cost_matches_bfs_oracle(a in seq(), b in seq()) {
            prop_assert_eq!(edit_ops(&a, &b).cost(), brute_force_edit_cost(&a, &b));
        }

        #[test]
        fn symmetry_swaps_deletions_and_insertions(a in seq(), b in seq()) {
            let f = edit_ops(&a, &b);
            let r = edit_ops(&b, &a);
            prop_assert_eq!(f.cost(), r.cost());
            prop_assert_eq!(f.substitutions, r.substitutions);
            prop_assert_eq!((f.deletions, f.insertions), (r.insertions, r.deletions));
            prop_assert!(f.substitutions + f.deletions <= a.len());
            prop_assert_eq!(f.deletions as isize - f.insertions as isize, a.len() as isize - b.len() as isize);
            prop_assert_eq!(r.deletions as isize - r.insertions as isize, b.len() as isize - a.len() as isize);
        }

        #[test]
        fn triangle_inequality(a in seq(), b in seq(), c in seq()) {
            prop_assert!(edit_ops(&a, &c).cost() <= edit_ops(&a, &b).cost() + edit_ops(&b, &c).cost());
        }

        #[test]
        fn corpus_rate_order_invariant(pairs in prop::collection::vec((prop::collection::vec(0usize..5, 1..5), prop::collection::vec(0usize..5, 0..5)), 1..6)) {
            let mut rev = pairs.clone();
            rev.reverse();
            prop_assert_eq!(corpus_rate(&pairs, RateLevel::Word).unwrap(), corpus_rate(&rev, RateLevel::Word).unwrap());
        }
    }
}
