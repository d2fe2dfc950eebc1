//! Fast implementations against exhaustive searches.
#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rulechat_core::bertqa::extract_answer;
use rulechat_core::extraction::{pair_spans, BoundaryScores};
use rulechat_core::sharc::match_span;
use rulechat_core::text::join_tokens;
use rulechat_core::Real;

fn brute_pairs(alpha: &[Real], beta: &[Real], tau: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..alpha.len() {
        if alpha[i] as f64 <= tau {
            continue;
        }
        for j in i..beta.len() {
            if beta[j] as f64 > tau {
                out.push((i, j));
                break;
            }
        }
    }
    out
}

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
        }
    }
    d[a.len()][b.len()]
}

fn brute_match(snippet: &[String], clause: &[String]) -> (usize, usize, usize) {
    let target = join_tokens(clause);
    let mut best = None;
    for s in 0..snippet.len() {
        for e in s..snippet.len() {
            let d = levenshtein(&join_tokens(&snippet[s..=e]), &target);
            let key = (d, e - s, s);
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        }
    }
    let (d, len, s) = best.unwrap();
    (s, s + len, d)
}

fn brute_answer(s: &[Real], e: &[Real]) -> (usize, usize, Real) {
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

/// Probability vector; half the time drawn from a coarse grid so ties occur.
fn probabilities(rng: &mut ChaCha8Rng, n: usize) -> Vec<Real> {
    let coarse = rng.random_bool(0.5);
    let raw: Vec<f64> = (0..n)
        .map(|_| {
            if coarse {
                rng.random_range(0..4) as f64
            } else {
                rng.random::<f64>()
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        return vec![1.0 / n as Real; n];
    }
    raw.iter().map(|x| (x / total) as Real).collect()
}

#[test]
fn pair_spans_matches_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let n = rng.random_range(0..24);
        let grid = rng.random_bool(0.3);
        let mut draw = || -> Real {
            if grid {
                rng.random_range(0..3) as Real * 0.25
            } else {
                rng.random::<f64>() as Real
            }
        };
        let alpha: Vec<Real> = (0..n).map(|_| draw()).collect();
        let beta: Vec<Real> = (0..n).map(|_| draw()).collect();
        let tau = [0.5, 0.25, 0.1, 0.9][rng.random_range(0..4)];
        let scores = BoundaryScores {
            alpha: alpha.clone(),
            beta: beta.clone(),
        };
        assert_eq!(pair_spans(&scores, tau), brute_pairs(&alpha, &beta, tau), "{alpha:?} {beta:?} {tau}");
    }
}

#[test]
fn pair_spans_worked_example() {
    let scores = BoundaryScores {
        alpha: vec![0.9, 0.2, 0.6, 0.1],
        beta: vec![0.1, 0.7, 0.2, 0.8],
    };
    assert_eq!(pair_spans(&scores, 0.5), vec![(0, 1), (2, 3)]);
}

const WORDS: [&str; 12] = [
    "uk", "resident", "residents", "you", "must", "be", "a", "pension", "over", "60", "carer", "age",
];

fn perturb(rng: &mut ChaCha8Rng, word: &str) -> String {
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

#[test]
fn match_span_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..100 {
        let n = rng.random_range(1..14);
        let snippet: Vec<String> = (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string()).collect();
        let clause: Vec<String> = if case % 3 == 0 {
            (0..rng.random_range(1..4)).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string()).collect()
        } else {
            let s = rng.random_range(0..n);
            let e = rng.random_range(s..n.min(s + 4));
            snippet[s..=e].iter().map(|w| perturb(&mut rng, w)).collect()
        };
        let m = match_span(&snippet, &clause).unwrap();
        assert_eq!((m.start, m.end, m.distance), brute_match(&snippet, &clause), "{snippet:?} / {clause:?}");
    }
}

#[test]
fn match_span_worked_examples() {
    let snippet: Vec<String> = "you must be a uk resident to qualify".split(' ').map(String::from).collect();
    let exact: Vec<String> = vec!["uk".into(), "resident".into()];
    let m = match_span(&snippet, &exact).unwrap();
    assert_eq!((m.start, m.end, m.distance), (4, 5, 0));
    let plural: Vec<String> = vec!["uk".into(), "residents".into()];
    let m = match_span(&snippet, &plural).unwrap();
    assert_eq!((m.start, m.end, m.distance), (4, 5, 1));
    assert_eq!(brute_match(&snippet, &plural), (4, 5, 1));
    let m = match_span(&snippet, &snippet).unwrap();
    assert_eq!((m.start, m.end), (0, 7));
}

#[test]
fn extract_answer_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let n = rng.random_range(1..30);
        let s = probabilities(&mut rng, n);
        let e = probabilities(&mut rng, n);
        let (i, j, score) = extract_answer(&s, &e).unwrap();
        assert_eq!((i, j, score), brute_answer(&s, &e), "{s:?} {e:?}");
        assert!(((s.iter().sum::<Real>() - 1.0) as f64).abs() < 1e-6);
    }
}

#[test]
fn extract_answer_worked_examples() {
    let (i, j, score) = extract_answer(&[0.6, 0.3, 0.1], &[0.2, 0.7, 0.1]).unwrap();
    assert_eq!((i, j), (0, 1));
    assert!((score as f64 - 0.42).abs() < 1e-6);
    assert_eq!(brute_answer(&[0.6, 0.3, 0.1], &[0.2, 0.7, 0.1]).0, 0);
    assert_eq!(extract_answer(&[1.0], &[1.0]).map(|a| (a.0, a.1)), Some((0, 0)));
    assert_eq!(extract_answer(&[], &[]), None);
}
