//! Input summary, class and inquiry scoring, decision loss and the inference rule.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::nn::{attention_pool, Linear, ModelError};
use crate::params::ParamStore;
use crate::tensor::{self, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Yes,
    No,
    Irrelevant,
    Inquire,
}

impl Decision {
    /// Class order used by the score vector and for tie-breaking.
    pub const ALL: [Decision; 4] = [Decision::Yes, Decision::No, Decision::Irrelevant, Decision::Inquire];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            Decision::Yes => "yes",
            Decision::No => "no",
            Decision::Irrelevant => "irrelevant",
            Decision::Inquire => "inquire",
        }
    }

    /// Parses a final-answer label (`Yes`, `No`, `Irrelevant`, any case). `inquire` is not an answer.
    pub fn from_label(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "yes" => Some(Decision::Yes),
            "no" => Some(Decision::No),
            "irrelevant" => Some(Decision::Irrelevant),
            _ => None,
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionOutput {
    /// Class scores ordered yes, no, irrelevant, inquire.
    pub z: [Real; 4],
    /// One inquiry score per rule.
    pub r: Vec<Real>,
    pub c: Vec<Real>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMove {
    pub decision: Decision,
    pub rule_index: Option<usize>,
    pub question: Option<String>,
}

/// Graph handles for one scoring pass.
#[derive(Debug, Clone, Copy)]
pub struct ScoreVars {
    pub z: Var,
    /// `[1 × n_rules]`, absent when there are no rules.
    pub r: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct DecisionHead {
    summary: Linear,
    class: Linear,
    inquiry: Linear,
}

impl DecisionHead {
    pub fn new(store: &mut ParamStore, prefix: &str, d_model: usize, rng: &mut impl Rng) -> Self {
        DecisionHead {
            summary: Linear::new(store, &format!("{prefix}/summary"), d_model, 1, rng),
            class: Linear::new(store, &format!("{prefix}/class"), d_model, 4, rng),
            inquiry: Linear::new(store, &format!("{prefix}/inquiry"), d_model + 2, 1, rng),
        }
    }

    /// Self-attention summary over all input rows. Returns (`C` `[1 × d]`, weights `[n × 1]`).
    pub fn summarize(&self, g: &mut Graph, u: Var) -> Result<(Var, Var), ModelError> {
        Ok(attention_pool(g, &self.summary, u)?)
    }

    /// `z = W_z·C + b_z`; `r_i = W_r·A_i + b_r` for every enriched rule `A_i` (`[1 × (d+2)]`).
    pub fn score(&self, g: &mut Graph, c: Var, rules: &[Var]) -> Result<ScoreVars, ModelError> {
        let z = self.class.forward(g, c)?;
        let r = if rules.is_empty() {
            None
        } else {
            let stacked = g.concat(rules, 0)?;
            let scores = self.inquiry.forward(g, stacked)?;
            Some(g.reshape(scores, &[1, rules.len()])?)
        };
        Ok(ScoreVars { z, r })
    }
}

pub fn output_values(g: &Graph, c: Var, vars: ScoreVars) -> DecisionOutput {
    let zs = g.value(vars.z).data();
    DecisionOutput {
        z: [zs[0], zs[1], zs[2], zs[3]],
        r: vars.r.map(|r| g.value(r).data().to_vec()).unwrap_or_default(),
        c: g.value(c).data().to_vec(),
    }
}

/// `-log softmax(z)_k - 1[k = inquire]·log softmax(r)_i`.
///
/// The inquiry term is skipped when there is no rule to point at; the returned
/// flag is true in that case.
pub fn decision_loss(
    g: &mut Graph,
    vars: ScoreVars,
    gold: Decision,
    gold_rule: Option<usize>,
) -> Result<(Var, bool), ModelError> {
    let log_z = g.log_softmax(vars.z, 1)?;
    let class_term = g.pick(log_z, gold.index())?;
    let mut loss = g.scale(class_term, -1.0);
    let mut flagged = false;
    if gold == Decision::Inquire {
        match (vars.r, gold_rule) {
            (Some(r), Some(i)) => {
                let log_r = g.log_softmax(r, 1)?;
                let rule_term = g.pick(log_r, i)?;
                loss = g.sub(loss, rule_term)?;
            }
            _ => flagged = true,
        }
    }
    Ok((loss, flagged))
}

/// `argmax z` (ties to the earlier class); for inquire, `argmax r` (ties to the lower index).
/// Inquire with no rules falls back to the best non-inquire class.
pub fn infer(out: &DecisionOutput) -> ModelMove {
    let best = tensor::argmax(&out.z).expect("four scores");
    let decision = Decision::from_index(best).expect("valid class");
    if decision != Decision::Inquire {
        return ModelMove {
            decision,
            rule_index: None,
            question: None,
        };
    }
    match tensor::argmax(&out.r) {
        Some(i) => ModelMove {
            decision,
            rule_index: Some(i),
            question: None,
        },
        None => {
            let fallback = tensor::argmax(&out.z[..3]).expect("three scores");
            ModelMove {
                decision: Decision::from_index(fallback).expect("valid class"),
                rule_index: None,
                question: None,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Mode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn out(z: [Real; 4], r: &[Real]) -> DecisionOutput {
        DecisionOutput {
            z,
            r: r.to_vec(),
            c: vec![],
        }
    }

    #[test]
    fn inference_rule() {
        assert_eq!(infer(&out([2.0, 0.0, 0.0, 0.0], &[])).decision, Decision::Yes);
        let m = infer(&out([0.0, 0.0, 0.0, 2.0], &[0.3, 1.2]));
        assert_eq!((m.decision, m.rule_index), (Decision::Inquire, Some(1)));
        assert_eq!(infer(&out([1.0, 1.0, 0.0, 0.0], &[])).decision, Decision::Yes);
        let m = infer(&out([0.0, 0.5, 0.1, 2.0], &[]));
        assert_eq!((m.decision, m.rule_index), (Decision::No, None));
        let m = infer(&out([0.0, 0.0, 0.0, 2.0], &[0.7, 0.7]));
        assert_eq!(m.rule_index, Some(0));
    }

    fn zeroed_head(d: usize) -> (ParamStore, DecisionHead) {
        let mut store = ParamStore::new();
        let head = DecisionHead::new(&mut store, "decide", d, &mut ChaCha8Rng::seed_from_u64(1));
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        (store, head)
    }

    #[test]
    fn summary_is_mean_with_zero_weights() {
        let (store, head) = zeroed_head(2);
        let mut g = Graph::new(&store, Mode::Eval);
        let u = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        let (c, phi) = head.summarize(&mut g, u).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 4.0]);
        assert_eq!(g.value(phi).data(), &[0.5, 0.5]);
        let single = g.constant(Tensor::row(vec![7.0, -1.0]));
        let (c, _) = head.summarize(&mut g, single).unwrap();
        assert_eq!(g.value(c).data(), &[7.0, -1.0]);
    }

    #[test]
    fn losses_at_uniform_scores() {
        let (store, head) = zeroed_head(2);
        let mut g = Graph::new(&store, Mode::Eval);
        let c = g.constant(Tensor::row(vec![0.3, 0.9]));
        let a = g.constant(Tensor::row(vec![1.0, 2.0, 0.5, 0.0]));
        let vars = head.score(&mut g, c, &[a, a]).unwrap();
        let values = output_values(&g, c, vars);
        assert_eq!(values.z, [0.0; 4]);
        assert_eq!(values.r[0], values.r[1]);

        let (yes, flagged) = decision_loss(&mut g, vars, Decision::Yes, None).unwrap();
        assert!((g.value(yes).item() - 1.3863).abs() < 1e-4);
        assert!(!flagged);
        let (inq, _) = decision_loss(&mut g, vars, Decision::Inquire, Some(0)).unwrap();
        assert!((g.value(inq).item() - 2.0794).abs() < 1e-4);

        let no_rules = head.score(&mut g, c, &[]).unwrap();
        assert!(no_rules.r.is_none());
        let (l, flagged) = decision_loss(&mut g, no_rules, Decision::Inquire, None).unwrap();
        assert!(flagged);
        assert!((g.value(l).item() - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn confident_outputs_have_vanishing_loss() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let z = g.constant(Tensor::row(vec![-30.0, -30.0, -30.0, 30.0]));
        let r = g.constant(Tensor::row(vec![30.0, -30.0]));
        let (l, _) = decision_loss(&mut g, ScoreVars { z, r: Some(r) }, Decision::Inquire, Some(0)).unwrap();
        assert!(g.value(l).item() < 1e-6);
    }

    #[test]
    fn labels_round_trip() {
        for d in Decision::ALL {
            assert_eq!(Decision::from_index(d.index()), Some(d));
        }
        assert_eq!(Decision::from_label("Irrelevant"), Some(Decision::Irrelevant));
        assert_eq!(Decision::from_label("inquire"), None);
        assert_eq!(serde_json::to_string(&Decision::Inquire).unwrap(), "\"inquire\"");
    }
}
