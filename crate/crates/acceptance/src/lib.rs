//! Exhaustive reference implementations and random case generators for the acceptance suite.
#![allow(clippy::needless_range_loop)]

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rulechat_core::text::join_tokens;
use rulechat_core::Real;

/// Every start above `tau` paired with the first end above `tau` at or after it.
pub fn brute_pairs(alpha: &[Real], beta: &[Real], tau: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..alpha.len() {
        if alpha[i] as f64 <= tau {
            continue;
        }
        if let Some(j) = (i..beta.len()).find(|&j| beta[j] as f64 > tau) {
            out.push((i, j));
        }
    }
    out
}

pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for i in 1..=a.len() {
        let mut row = vec![i; b.len() + 1];
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            row[j] = (prev[j] + 1).min(row[j - 1] + 1).min(prev[j - 1] + cost);
        }
        prev = row;
    }
    prev[b.len()]
}

/// Minimum edit distance over all subspans; ties go to the shorter, then the earlier span.
pub fn brute_match(snippet: &[String], clause: &[String]) -> (usize, usize, usize) {
    let target = join_tokens(clause);
    let mut best: Option<(usize, usize, usize)> = None;
    for s in 0..snippet.len() {
        for e in s..snippet.len() {
            let key = (levenshtein(&join_tokens(&snippet[s..=e]), &target), e - s, s);
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        }
    }
    let (d, len, s) = best.expect("non-empty snippet");
    (s, s + len, d)
}

/// Best `s_i * e_j` with `j >= i`; strict improvement keeps the smallest pair on ties.
pub fn brute_answer(s: &[Real], e: &[Real]) -> (usize, usize, Real) {
    let mut best = (0, 0, Real::NEG_INFINITY);
    for i in 0..s.len() {
        for j in i..e.len() {
            if s[i] * e[j] > best.2 {
                best = (i, j, s[i] * e[j]);
            }
        }
    }
    best
}

/// Set-based token F1.
pub fn set_f1(rule: &[&str], other: &[&str]) -> f64 {
    let r: BTreeSet<&str> = rule.iter().copied().collect();
    let o: BTreeSet<&str> = other.iter().copied().collect();
    let shared = r.intersection(&o).count() as f64;
    if shared == 0.0 {
        return 0.0;
    }
    let (p, q) = (shared / r.len() as f64, shared / o.len() as f64);
    2.0 * p * q / (p + q)
}

/// A probability vector; half the draws use a coarse grid so ties are common.
pub fn probabilities(rng: &mut ChaCha8Rng, n: usize) -> Vec<Real> {
    let coarse = rng.random_bool(0.5);
    let raw: Vec<f64> = (0..n)
        .map(|_| if coarse { rng.random_range(0..4) as f64 } else { rng.random::<f64>() })
        .collect();
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        return vec![1.0 / n as Real; n];
    }
    raw.iter().map(|x| (x / total) as Real).collect()
}

/// Boundary scores in [0, 1), sometimes on a 0.25 grid that hits common thresholds exactly.
pub fn boundary_scores(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Real>, Vec<Real>) {
    let grid = rng.random_bool(0.3);
    let mut draw = || -> Real {
        if grid {
            rng.random_range(0..3) as Real * 0.25
        } else {
            rng.random::<f64>() as Real
        }
    };
    let alpha = (0..n).map(|_| draw()).collect();
    let beta = (0..n).map(|_| draw()).collect();
    (alpha, beta)
}

pub const WORDS: [&str; 12] = [
    "uk", "resident", "residents", "you", "must", "be", "a", "pension", "over", "60", "carer", "age",
];

/// One random edit (deletion, insertion or substitution) or none.
pub fn perturb(rng: &mut ChaCha8Rng, word: &str) -> String {
    let mut chars: Vec<char> = word.chars().collect();
    match rng.random_range(0..4) {
        0 if chars.len() > 1 => {
            chars.remove(rng.random_range(0..chars.len()));
        }
        1 => chars.insert(rng.random_range(0..=chars.len()), 's'),
        2 => {
            let k = rng.random_range(0..chars.len());
            chars[k] = 'x';
        }
        _ => {}
    }
    chars.into_iter().collect()
}

/// A snippet and a clause that is either unrelated or a perturbed copy of a snippet slice.
pub fn match_case(rng: &mut ChaCha8Rng, unrelated: bool) -> (Vec<String>, Vec<String>) {
    let n = rng.random_range(1..14);
    let snippet: Vec<String> = (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string()).collect();
    let clause = if unrelated {
        (0..rng.random_range(1..4)).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string()).collect()
    } else {
        let s = rng.random_range(0..n);
        let e = rng.random_range(s..n.min(s + 4));
        snippet[s..=e].iter().map(|w| perturb(rng, w)).collect()
    };
    (snippet, clause)
}
