use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::LabelSeq;
use crate::error::{Error, Result};

pub const LM_FORMAT: &str = "anchorstream-char-lm";
const BOS: &str = "<s>";
const EOS: &str = "</s>";

/// Additively smoothed token n-gram model over `vocab_size` tokens plus a
/// sentence boundary. Contexts never seen in training fall back to uniform,
/// which is what additive smoothing assigns them anyway.
#[derive(Clone, Debug, PartialEq)]
pub struct CharNgramLM {
    order: usize,
    smoothing: f64,
    vocab_size: usize,
    /// Context (boundary-padded, length `order - 1`) to log-probabilities over
    /// `vocab_size` tokens followed by end-of-sentence.
    table: BTreeMap<Vec<Symbol>, Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Symbol {
    Bos,
    Token(usize),
}

pub fn train_lm(
    corpus: &[LabelSeq],
    order: usize,
    smoothing: f64,
    vocab_size: usize,
) -> Result<CharNgramLM> {
    if corpus.is_empty() {
        return Err(Error::domain("language model corpus is empty"));
    }
    if order < 1 {
        return Err(Error::domain("n-gram order must be at least 1"));
    }
    if !(smoothing > 0.0 && smoothing.is_finite()) {
        return Err(Error::domain("smoothing must be positive and finite"));
    }
    if vocab_size == 0 {
        return Err(Error::domain("vocab_size must be positive"));
    }
    let n_next = vocab_size + 1;
    let mut counts: BTreeMap<Vec<Symbol>, Vec<f64>> = BTreeMap::new();
    for seq in corpus {
        if let Some(&bad) = seq.tokens().iter().find(|&&t| t >= vocab_size) {
            return Err(Error::domain(format!("corpus token {bad} outside vocabulary")));
        }
        let toks = seq.tokens();
        for i in 0..=toks.len() {
            let ctx = context_of(&toks[..i], order);
            let next = if i < toks.len() { toks[i] } else { vocab_size };
            counts.entry(ctx).or_insert_with(|| vec![0.0; n_next])[next] += 1.0;
        }
    }
    let table = counts
        .into_iter()
        .map(|(ctx, c)| {
            let denom = c.iter().sum::<f64>() + smoothing * n_next as f64;
            let row = c.iter().map(|&x| ((x + smoothing) / denom).ln()).collect();
            (ctx, row)
        })
        .collect();
    Ok(CharNgramLM {
        order,
        smoothing,
        vocab_size,
        table,
    })
}

fn context_of(history: &[usize], order: usize) -> Vec<Symbol> {
    let want = order - 1;
    let mut ctx = Vec::with_capacity(want);
    let have = history.len().min(want);
    ctx.extend(std::iter::repeat_n(Symbol::Bos, want - have));
    ctx.extend(history[history.len() - have..].iter().map(|&t| Symbol::Token(t)));
    ctx
}

impl CharNgramLM {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    /// `log P(next | history)`; `None` is end-of-sentence.
    pub fn log_prob(&self, history: &[usize], next: Option<usize>) -> f64 {
        let idx = next.unwrap_or(self.vocab_size);
        match self.table.get(&context_of(history, self.order)) {
            Some(row) if idx < row.len() => row[idx],
            _ => -((self.vocab_size + 1) as f64).ln(),
        }
    }

    /// Log-probability of a whole sentence including its end marker.
    pub fn sentence_log_prob(&self, seq: &[usize]) -> f64 {
        (0..seq.len())
            .map(|i| self.log_prob(&seq[..i], Some(seq[i])))
            .sum::<f64>()
            + self.log_prob(seq, None)
    }

    /// Per-symbol perplexity (end markers counted).
    pub fn perplexity(&self, corpus: &[LabelSeq]) -> f64 {
        let mut lp = 0.0;
        let mut n = 0usize;
        for s in corpus {
            lp += self.sentence_log_prob(s.tokens());
            n += s.len() + 1;
        }
        (-lp / n.max(1) as f64).exp()
    }

    /// Every stored context row, for inspection.
    pub fn contexts(&self) -> impl Iterator<Item = (String, &[f64])> {
        self.table.iter().map(|(c, r)| (context_key(c), r.as_slice()))
    }

    pub fn to_json(&self) -> Result<String> {
        let table = self
            .table
            .iter()
            .map(|(ctx, row)| {
                let probs = row
                    .iter()
                    .enumerate()
                    .map(|(i, &lp)| (symbol_key(i, self.vocab_size), lp))
                    .collect();
                (context_key(ctx), probs)
            })
            .collect();
        Ok(serde_json::to_string_pretty(&LmFile {
            format: LM_FORMAT.to_string(),
            order: self.order,
            smoothing: self.smoothing,
            vocab_size: self.vocab_size,
            table,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: LmFile = serde_json::from_str(s)?;
        let bad = |m: String| Error::Format(m);
        if f.format != LM_FORMAT {
            return Err(bad(format!("expected format {LM_FORMAT}, got {}", f.format)));
        }
        if f.order < 1 || f.vocab_size == 0 || !(f.smoothing > 0.0 && f.smoothing.is_finite()) {
            return Err(bad("order, vocab_size and smoothing must be positive".into()));
        }
        let n_next = f
            .vocab_size
            .checked_add(1)
            .ok_or_else(|| bad("vocab_size overflow".into()))?;
        let mut table = BTreeMap::new();
        for (ctx_key, probs) in f.table {
            let ctx = parse_context(&ctx_key, f.vocab_size)?;
            if ctx.len() != f.order - 1 {
                return Err(bad(format!("context '{ctx_key}' has wrong length for order {}", f.order)));
            }
            if probs.len() != n_next {
                return Err(bad(format!("context '{ctx_key}' must list {n_next} symbols")));
            }
            let mut row = vec![f64::NAN; n_next];
            for (sym, lp) in probs {
                let i = parse_symbol(&sym, f.vocab_size)?;
                if !(lp.is_finite() && lp <= 0.0) {
                    return Err(bad(format!("log-probability {lp} is not a valid log-probability")));
                }
                row[i] = lp;
            }
            let mass: f64 = row.iter().map(|v| v.exp()).sum();
            if !((mass - 1.0).abs() < 1e-6) {
                return Err(bad(format!("context '{ctx_key}' sums to {mass}, not 1")));
            }
            table.insert(ctx, row);
        }
        Ok(CharNgramLM {
            order: f.order,
            smoothing: f.smoothing,
            vocab_size: f.vocab_size,
            table,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LmFile {
    format: String,
    order: usize,
    smoothing: f64,
    vocab_size: usize,
    table: BTreeMap<String, BTreeMap<String, f64>>,
}

fn context_key(ctx: &[Symbol]) -> String {
    ctx.iter()
        .map(|s| match s {
            Symbol::Bos => BOS.to_string(),
            Symbol::Token(t) => t.to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn symbol_key(i: usize, vocab: usize) -> String {
    if i == vocab {
        EOS.to_string()
    } else {
        i.to_string()
    }
}

fn parse_symbol(s: &str, vocab: usize) -> Result<usize> {
    if s == EOS {
        return Ok(vocab);
    }
    match s.parse::<usize>() {
        Ok(t) if t < vocab => Ok(t),
        _ => Err(Error::Format(format!("unknown LM symbol '{s}'"))),
    }
}

fn parse_context(s: &str, vocab: usize) -> Result<Vec<Symbol>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(' ')
        .map(|tok| {
            if tok == BOS {
                Ok(Symbol::Bos)
            } else {
                match tok.parse::<usize>() {
                    Ok(t) if t < vocab => Ok(Symbol::Token(t)),
                    _ => Err(Error::Format(format!("unknown context symbol '{tok}'"))),
                }
            }
        })
        .collect()
}
