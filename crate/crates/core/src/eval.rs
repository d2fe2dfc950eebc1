//! Decision accuracy, corpus BLEU, the combined metric and rule-span F1.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decision::Decision;
use crate::sharc::RawExample;

const BLEU_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no examples to evaluate")]
    Empty,
    #[error("{golds} gold labels but {preds} predictions")]
    LengthMismatch { golds: usize, preds: usize },
    #[error("no prediction for utterance {0}")]
    MissingPrediction(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub micro: f64,
    pub macro_: f64,
    /// Counts indexed `[gold][predicted]` in yes, no, irrelevant, inquire order.
    pub confusion: [[usize; 4]; 4],
}

pub fn classification_metrics(
    golds: &[Decision],
    preds: &[Decision],
) -> Result<ClassificationMetrics, EvalError> {
    if golds.len() != preds.len() {
        return Err(EvalError::LengthMismatch {
            golds: golds.len(),
            preds: preds.len(),
        });
    }
    if golds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut confusion = [[0usize; 4]; 4];
    for (g, p) in golds.iter().zip(preds) {
        confusion[g.index()][p.index()] += 1;
    }
    let correct: usize = (0..4).map(|k| confusion[k][k]).sum();
    let micro = 100.0 * correct as f64 / golds.len() as f64;
    let recalls: Vec<f64> = (0..4)
        .filter_map(|k| {
            let total: usize = confusion[k].iter().sum();
            (total > 0).then(|| confusion[k][k] as f64 / total as f64)
        })
        .collect();
    let macro_ = 100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64;
    Ok(ClassificationMetrics {
        micro,
        macro_,
        confusion,
    })
}

fn ngram_counts(tokens: &[&str], n: usize) -> HashMap<Vec<String>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts
                .entry(w.iter().map(|s| s.to_string()).collect())
                .or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU (percentage) over whitespace tokens with clipped n-gram precision.
///
/// Zero match counts are replaced by a small epsilon before the geometric mean. An
/// order with no n-grams on either side counts as precision 1. An empty corpus scores 0.
pub fn bleu<C: AsRef<str>, R: AsRef<str>>(candidates: &[C], references: &[R], max_n: usize) -> f64 {
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut ref_totals = vec![0usize; max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (c, r) in candidates.iter().zip(references) {
        let c: Vec<&str> = c.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let cc = ngram_counts(&c, n);
            let rc = ngram_counts(&r, n);
            totals[n - 1] += cc.values().sum::<usize>();
            ref_totals[n - 1] += rc.values().sum::<usize>();
            matches[n - 1] += cc
                .iter()
                .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if cand_len == 0 || max_n == 0 {
        return 0.0;
    }
    let log_mean = (0..max_n)
        .map(|k| {
            let p = if totals[k] == 0 && ref_totals[k] == 0 {
                1.0
            } else if matches[k] == 0 {
                BLEU_EPSILON
            } else {
                matches[k] as f64 / totals[k] as f64
            };
            p.ln()
        })
        .sum::<f64>()
        / max_n as f64;
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * log_mean.exp()
}

/// `(macro / 100) · bleu4`.
pub fn combined(macro_pct: f64, bleu4_pct: f64) -> f64 {
    macro_pct / 100.0 * bleu4_pct
}

/// One example's gold and predicted moves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredMove {
    pub gold: Decision,
    pub gold_question: Option<String>,
    pub predicted: Decision,
    pub predicted_question: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub micro_acc: f64,
    pub macro_acc: f64,
    pub bleu1: f64,
    pub bleu4: f64,
    pub combined: f64,
    pub confusion: [[usize; 4]; 4],
}

/// BLEU covers examples whose gold move is an inquiry. The candidate is the predicted
/// question when the model inquires, otherwise its decision label.
pub fn evaluate_moves(moves: &[ScoredMove]) -> Result<EvalReport, EvalError> {
    let golds: Vec<Decision> = moves.iter().map(|m| m.gold).collect();
    let preds: Vec<Decision> = moves.iter().map(|m| m.predicted).collect();
    let cls = classification_metrics(&golds, &preds)?;
    let mut candidates = Vec::new();
    let mut references = Vec::new();
    for m in moves {
        if let (Decision::Inquire, Some(q)) = (m.gold, &m.gold_question) {
            references.push(bleu_text(q));
            let cand = match (m.predicted, &m.predicted_question) {
                (Decision::Inquire, Some(p)) => bleu_text(p),
                (d, _) => d.label().to_string(),
            };
            candidates.push(cand);
        }
    }
    let bleu1 = bleu(&candidates, &references, 1);
    let bleu4 = bleu(&candidates, &references, 4);
    Ok(EvalReport {
        micro_acc: cls.micro,
        macro_acc: cls.macro_,
        bleu1,
        bleu4,
        combined: combined(cls.macro_, bleu4),
        confusion: cls.confusion,
    })
}

/// One entry of a predictions file, keyed by utterance id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedMove {
    pub decision: Decision,
    #[serde(default)]
    pub question: Option<String>,
}

/// Scores a predictions map against gold records; every gold record needs a prediction.
pub fn evaluate_predictions(
    gold: &[RawExample],
    predictions: &BTreeMap<String, PredictedMove>,
) -> Result<EvalReport, EvalError> {
    let moves = gold
        .iter()
        .map(|raw| {
            let p = predictions
                .get(&raw.utterance_id)
                .ok_or_else(|| EvalError::MissingPrediction(raw.utterance_id.clone()))?;
            let g = raw.gold();
            Ok(ScoredMove {
                gold: g.decision,
                gold_question: g.question,
                predicted: p.decision,
                predicted_question: p.question.clone(),
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    evaluate_moves(&moves)
}

/// Tokenized, space-joined form used for BLEU.
fn bleu_text(s: &str) -> String {
    crate::text::join_tokens(&crate::text::tokenize(s).tokens)
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut out = format!(
            "micro  {:6.2}\nmacro  {:6.2}\nbleu1  {:6.2}\nbleu4  {:6.2}\ncomb   {:6.2}\n\n",
            self.micro_acc, self.macro_acc, self.bleu1, self.bleu4, self.combined
        );
        out.push_str("gold\\pred     yes     no    irr    inq\n");
        for d in Decision::ALL {
            out.push_str(&format!("{:<10}", d.label()));
            for k in 0..4 {
                out.push_str(&format!(" {:6}", self.confusion[d.index()][k]));
            }
            out.push('\n');
        }
        out
    }
}

/// Exact-match span precision, recall and F1 pooled over examples (percentages).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn span_f1(predicted: &[Vec<(usize, usize)>], gold: &[Vec<(usize, usize)>]) -> SpanScore {
    let mut hits = 0usize;
    let mut n_pred = 0usize;
    let mut n_gold = 0usize;
    for (p, g) in predicted.iter().zip(gold) {
        let p: HashSet<_> = p.iter().collect();
        let g: HashSet<_> = g.iter().collect();
        hits += p.intersection(&g).count();
        n_pred += p.len();
        n_gold += g.len();
    }
    let precision = if n_pred == 0 { 0.0 } else { hits as f64 / n_pred as f64 };
    let recall = if n_gold == 0 { 0.0 } else { hits as f64 / n_gold as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    SpanScore {
        precision: 100.0 * precision,
        recall: 100.0 * recall,
        f1: 100.0 * f1,
    }
}
