//! Token-overlap entailment scores between rule spans and the dialogue so far.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::extraction::RuleSpan;
use crate::nn::ModelError;
use crate::tensor::{Real, Tensor};

/// F1 of unique-token overlap. Zero when either side is empty or nothing is shared.
pub fn overlap_f1<A: AsRef<str>, B: AsRef<str>>(rule: &[A], other: &[B]) -> f64 {
    let r: HashSet<&str> = rule.iter().map(AsRef::as_ref).collect();
    let o: HashSet<&str> = other.iter().map(AsRef::as_ref).collect();
    if r.is_empty() || o.is_empty() {
        return 0.0;
    }
    let shared = r.intersection(&o).count() as f64;
    if shared == 0.0 {
        return 0.0;
    }
    let precision = shared / r.len() as f64;
    let recall = shared / o.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Scenario score `g` and history score `h` (best match over previous inquiries).
pub fn entail_scores<S: AsRef<str>>(rule: &[S], scenario: &[S], inquiries: &[&[S]]) -> (f64, f64) {
    let g = overlap_f1(rule, scenario);
    let h = inquiries
        .iter()
        .map(|q| overlap_f1(rule, q))
        .fold(0.0, f64::max);
    (g, h)
}

/// A rule span with its entailment scores and enriched representation `[pooled; g; h]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntailedRule {
    pub span: RuleSpan,
    pub g: Real,
    pub h: Real,
    pub a: Vec<Real>,
}

pub fn enrich(span: RuleSpan, g: Real, h: Real) -> Result<EntailedRule, ModelError> {
    let pooled = span.pooled.as_ref().ok_or(ModelError::MissingPooled)?;
    let mut a = pooled.clone();
    a.push(g);
    a.push(h);
    Ok(EntailedRule { span, g, h, a })
}

/// Graph form of [`enrich`]: appends `g` and `h` as constants, so no gradient
/// ever flows through the entailment scores.
pub fn enrich_var(graph: &mut Graph, pooled: Var, g: Real, h: Real) -> Result<Var, ModelError> {
    let scores = graph.constant(Tensor::row(vec![g, h]));
    Ok(graph.concat(&[pooled, scores], 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn t(s: &str) -> Vec<String> {
        tokenize(s).tokens
    }

    #[test]
    fn f1_examples() {
        assert_eq!(overlap_f1(&t("uk resident"), &t("resident uk")), 1.0);
        assert_eq!(overlap_f1(&t("uk resident"), &t("savings")), 0.0);
        let f = overlap_f1(&t("uk resident"), &t("are you a uk resident"));
        assert!((f - 2.0 * 0.4 / 1.4).abs() < 1e-12);
        assert!((f - 0.5714).abs() < 1e-4);
        assert_eq!(overlap_f1::<&str, &str>(&[], &["a"]), 0.0);
    }

    #[test]
    fn history_score_is_best_inquiry() {
        let rule = t("uk resident");
        let scen = t("i am 60 years old");
        let (g, h) = entail_scores::<String>(&rule, &scen, &[]);
        assert_eq!((g, h), (0.0, 0.0));
        let q1 = t("do you have savings");
        let q2 = t("uk resident");
        let (_, h) = entail_scores(&rule, &scen, &[q1.as_slice(), q2.as_slice()]);
        assert_eq!(h, 1.0);
    }

    #[test]
    fn enrichment_layout() {
        let mut span = RuleSpan::new(0, 1, "uk resident");
        assert!(matches!(enrich(span.clone(), 0.0, 0.0), Err(ModelError::MissingPooled)));
        span.pooled = Some(vec![0.5; 128]);
        let e = enrich(span, 0.0, 0.0).unwrap();
        assert_eq!(e.a.len(), 130);
        assert_eq!(&e.a[128..], &[0.0, 0.0]);
        assert_eq!(&e.a[..128], &[0.5; 128][..]);
    }
}
