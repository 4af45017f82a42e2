//! Independent reference computations used by tests and the `validate`
//! command. Each one solves its problem by exhaustive enumeration or
//! numerical differencing, never through the production code path.

use std::collections::{BTreeMap, HashMap, VecDeque};

use crate::tensor::Tensor;

/// Collapse a frame path: merge repeats, then drop blanks.
pub fn collapse_path(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if k != blank && prev != Some(k) {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

fn for_each_path(t_len: usize, n_out: usize, mut f: impl FnMut(&[usize])) {
    let mut path = vec![0usize; t_len];
    loop {
        f(&path);
        let mut i = t_len;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            path[i] += 1;
            if path[i] < n_out {
                break;
            }
            path[i] = 0;
        }
    }
}

/// `-log Σ_paths P(path)` over every `(V+1)^T` frame path collapsing to `labels`.
pub fn brute_force_ctc_nll(log_probs: &Tensor, labels: &[usize]) -> f64 {
    let (t_len, n_out) = (log_probs.rows(), log_probs.cols());
    let blank = n_out - 1;
    let mut total = 0.0;
    for_each_path(t_len, n_out, |path| {
        if collapse_path(path, blank) == labels {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &k)| log_probs.get(t, k))
                .sum::<f64>()
                .exp();
        }
    });
    -total.ln()
}

/// Log posterior of every label sequence reachable in `T` frames, sorted by sequence.
pub fn brute_force_sequence_posteriors(log_probs: &Tensor) -> Vec<(Vec<usize>, f64)> {
    let (t_len, n_out) = (log_probs.rows(), log_probs.cols());
    let blank = n_out - 1;
    let mut acc: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    for_each_path(t_len, n_out, |path| {
        let p: f64 = path
            .iter()
            .enumerate()
            .map(|(t, &k)| log_probs.get(t, k))
            .sum::<f64>()
            .exp();
        *acc.entry(collapse_path(path, blank)).or_insert(0.0) += p;
    });
    acc.into_iter().map(|(k, v)| (k, v.ln())).collect()
}

/// Central differences `(f(x+h e_i) − f(x−h e_i)) / 2h` for every coordinate.
pub fn finite_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn neighbours(s: &[u8], alphabet: &[u8], max_len: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for i in 0..s.len() {
        let mut d = s.to_vec();
        d.remove(i);
        out.push(d);
        for &c in alphabet {
            if c != s[i] {
                let mut r = s.to_vec();
                r[i] = c;
                out.push(r);
            }
        }
    }
    if s.len() < max_len {
        for i in 0..=s.len() {
            for &c in alphabet {
                let mut ins = s.to_vec();
                ins.insert(i, c);
                out.push(ins);
            }
        }
    }
    out
}

/// Breadth-first search over single-symbol edits from `from` until `to` is
/// reached. Intermediate strings never need to exceed the longer endpoint.
pub fn brute_force_edit_cost(from: &[u8], to: &[u8]) -> usize {
    let mut alphabet: Vec<u8> = from.iter().chain(to).copied().collect();
    alphabet.sort_unstable();
    alphabet.dedup();
    let max_len = from.len().max(to.len());
    let mut dist: HashMap<Vec<u8>, usize> = HashMap::new();
    let mut queue = VecDeque::new();
    dist.insert(from.to_vec(), 0);
    queue.push_back(from.to_vec());
    while let Some(s) = queue.pop_front() {
        let d = dist[&s];
        if s == to {
            return d;
        }
        for n in neighbours(&s, &alphabet, max_len) {
            if !dist.contains_key(&n) {
                dist.insert(n.clone(), d + 1);
                queue.push_back(n);
            }
        }
    }
    unreachable!("every string is reachable by edits")
}

/// Every string over `0..alphabet` with length at most `max_len`.
pub fn all_strings(alphabet: u8, max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..alphabet {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Exhaustive all-pairs edit costs via one breadth-first search per source
/// over the graph of strings of length `≤ max_len`. Indexed like [`all_strings`].
pub fn all_pairs_edit_costs(alphabet: u8, max_len: usize) -> (Vec<Vec<u8>>, Vec<Vec<u8>>) {
    let strings = all_strings(alphabet, max_len);
    let index: HashMap<&[u8], usize> = strings
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_slice(), i))
        .collect();
    let letters: Vec<u8> = (0..alphabet).collect();
    let adj: Vec<Vec<usize>> = strings
        .iter()
        .map(|s| {
            neighbours(s, &letters, max_len)
                .iter()
                .map(|n| index[n.as_slice()])
                .collect()
        })
        .collect();
    let n = strings.len();
    let mut costs = vec![vec![u8::MAX; n]; n];
    let mut queue = VecDeque::new();
    for (src, row) in costs.iter_mut().enumerate() {
        row[src] = 0;
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            let d = row[u];
            for &v in &adj[u] {
                if row[v] == u8::MAX {
                    row[v] = d + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    (strings, costs)
}
