//! Rule-span boundary scoring, threshold pairing, span pooling and the extraction loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::nn::{attention_pool, Linear, ModelError};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_TAU: f64 = 0.5;

/// Per-document-token start (`alpha`) and end (`beta`) probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryScores {
    pub alpha: Vec<Real>,
    pub beta: Vec<Real>,
}

/// Graph handles for the boundary logits (`[n_D × 1]` each).
#[derive(Debug, Clone, Copy)]
pub struct BoundaryLogits {
    pub start: Var,
    pub end: Var,
}

/// A rule span over document tokens, both ends inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSpan {
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub pooled: Option<Vec<Real>>,
}

impl RuleSpan {
    pub fn new(start: usize, end: usize, text: impl Into<String>) -> Self {
        RuleSpan {
            start,
            end,
            text: text.into(),
            pooled: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExtractionHead {
    start: Linear,
    end: Linear,
    pool: Linear,
}

impl ExtractionHead {
    pub fn new(store: &mut ParamStore, prefix: &str, d_model: usize, rng: &mut impl Rng) -> Self {
        ExtractionHead {
            start: Linear::new(store, &format!("{prefix}/start"), d_model, 1, rng),
            end: Linear::new(store, &format!("{prefix}/end"), d_model, 1, rng),
            pool: Linear::new(store, &format!("{prefix}/pool"), d_model, 1, rng),
        }
    }

    /// `alpha_i = σ(W_α·U_i + b_α)` and likewise `beta` for every document row.
    pub fn score_boundaries(
        &self,
        g: &mut Graph,
        u_doc: Var,
    ) -> Result<(BoundaryLogits, BoundaryScores), ModelError> {
        let start = self.start.forward(g, u_doc)?;
        let end = self.end.forward(g, u_doc)?;
        let alpha = g.sigmoid(start);
        let beta = g.sigmoid(end);
        let scores = BoundaryScores {
            alpha: g.value(alpha).data().to_vec(),
            beta: g.value(beta).data().to_vec(),
        };
        Ok((BoundaryLogits { start, end }, scores))
    }

    /// Attention-pooled representation of rows `start..=end`; returns (pooled `[1 × d]`, weights `[len × 1]`).
    pub fn pool_span(
        &self,
        g: &mut Graph,
        u_doc: Var,
        start: usize,
        end: usize,
    ) -> Result<(Var, Var), ModelError> {
        let rows = g.slice(u_doc, 0, start, end + 1)?;
        Ok(attention_pool(g, &self.pool, rows)?)
    }
}

/// For each start with `alpha > tau`, pairs it with the nearest end `e >= start`
/// with `beta > tau`. Starts without such an end produce nothing.
pub fn pair_spans(scores: &BoundaryScores, tau: f64) -> Vec<(usize, usize)> {
    let n = scores.alpha.len().min(scores.beta.len());
    let mut next_end = vec![None; n + 1];
    for i in (0..n).rev() {
        next_end[i] = if scores.beta[i] as f64 > tau {
            Some(i)
        } else {
            next_end[i + 1]
        };
    }
    (0..n)
        .filter(|&i| scores.alpha[i] as f64 > tau)
        .filter_map(|i| next_end[i].map(|e| (i, e)))
        .collect()
}

/// Summed binary cross-entropy over document tokens for start and end positions.
///
/// Targets are multi-hot: every gold start (end) token has target 1, all others 0.
/// Returns the (start, end) loss terms.
pub fn extraction_loss_terms(
    g: &mut Graph,
    logits: BoundaryLogits,
    gold: &[(usize, usize)],
) -> Result<(Var, Var), ModelError> {
    let n = g.shape(logits.start)[0];
    let mut start_targets = vec![0.0; n];
    let mut end_targets = vec![0.0; n];
    for &(s, e) in gold {
        if s > e || e >= n {
            return Err(ModelError::GoldOutOfRange {
                start: s,
                end: e,
                len: n,
            });
        }
        start_targets[s] = 1.0;
        end_targets[e] = 1.0;
    }
    let start = bce_with_logits(g, logits.start, &start_targets)?;
    let end = bce_with_logits(g, logits.end, &end_targets)?;
    Ok((start, end))
}

pub fn extraction_loss(
    g: &mut Graph,
    logits: BoundaryLogits,
    gold: &[(usize, usize)],
) -> Result<Var, ModelError> {
    let (s, e) = extraction_loss_terms(g, logits, gold)?;
    Ok(g.add(s, e)?)
}

/// `-Σ [y·log σ(x) + (1-y)·log(1-σ(x))]`, written as `Σ [(1-y)·x - log σ(x)]`.
fn bce_with_logits(g: &mut Graph, logits: Var, targets: &[Real]) -> Result<Var, ModelError> {
    let shape = g.shape(logits).to_vec();
    let negatives = g.constant(Tensor::new(shape, targets.iter().map(|y| 1.0 - y).collect())?);
    let log_p = g.log_sigmoid(logits);
    let neg_part = g.mul(negatives, logits)?;
    let per_token = g.sub(neg_part, log_p)?;
    Ok(g.sum(per_token))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scores(alpha: &[Real], beta: &[Real]) -> BoundaryScores {
        BoundaryScores {
            alpha: alpha.to_vec(),
            beta: beta.to_vec(),
        }
    }

    #[test]
    fn pairing_examples() {
        let s = scores(&[0.9, 0.2, 0.6, 0.1], &[0.1, 0.7, 0.2, 0.8]);
        assert_eq!(pair_spans(&s, 0.5), vec![(0, 1), (2, 3)]);
        assert!(pair_spans(&scores(&[0.5, 0.1], &[0.9, 0.9]), 0.5).is_empty());
        assert_eq!(pair_spans(&scores(&[0.9], &[0.9]), 0.5), vec![(0, 0)]);
        // A start after the last qualifying end emits nothing.
        assert_eq!(pair_spans(&scores(&[0.9, 0.9], &[0.9, 0.1]), 0.5), vec![(0, 0)]);
    }

    fn head_with_zero_weights(d: usize) -> (ParamStore, ExtractionHead) {
        let mut store = ParamStore::new();
        let head = ExtractionHead::new(&mut store, "extract", d, &mut ChaCha8Rng::seed_from_u64(0));
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        (store, head)
    }

    #[test]
    fn zero_weights_give_half() {
        let (store, head) = head_with_zero_weights(4);
        let mut g = Graph::new(&store, Mode::Eval);
        let u = g.constant(Tensor::new(vec![3, 4], (0..12).map(|v| v as Real).collect()).unwrap());
        let (_, s) = head.score_boundaries(&mut g, u).unwrap();
        assert_eq!(s.alpha, vec![0.5; 3]);
        assert_eq!(s.beta, vec![0.5; 3]);
    }

    #[test]
    fn pooling_single_token_and_uniform() {
        let (store, head) = head_with_zero_weights(2);
        let mut g = Graph::new(&store, Mode::Eval);
        let u = g.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap());
        let (single, w) = head.pool_span(&mut g, u, 1, 1).unwrap();
        assert_eq!(g.value(single).data(), &[3.0, 4.0]);
        assert_eq!(g.value(w).data(), &[1.0]);
        let (mean, w) = head.pool_span(&mut g, u, 0, 2).unwrap();
        assert_eq!(g.value(mean).data(), &[3.0, 5.0]);
        assert!((g.value(w).data().iter().sum::<Real>() - 1.0).abs() < 1e-6);
    }

    fn loss_for(logits: &[Real], gold: &[(usize, usize)]) -> (Real, Real) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let n = logits.len();
        let start = g.constant(Tensor::new(vec![n, 1], logits.to_vec()).unwrap());
        let end = g.constant(Tensor::new(vec![n, 1], logits.to_vec()).unwrap());
        let (s, e) = extraction_loss_terms(&mut g, BoundaryLogits { start, end }, gold).unwrap();
        (g.value(s).item(), g.value(e).item())
    }

    #[test]
    fn loss_at_half_probability() {
        let (start, _) = loss_for(&[0.0, 0.0], &[(0, 1)]);
        assert!((start - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn loss_vanishes_at_saturation() {
        let (start, end) = loss_for(&[40.0, -40.0, -40.0], &[(0, 0)]);
        assert!(start < 1e-6 && end < 1e-6);
        let (start, end) = loss_for(&[40.0, -40.0], &[]);
        assert!(start > 1.0 && end > 1.0);
    }

    #[test]
    fn merged_targets_decompose_by_inclusion_exclusion() {
        let logits = [0.3, -1.2, 2.0, 0.7, -0.4];
        let both = loss_for(&logits, &[(0, 1), (3, 4)]);
        let first = loss_for(&logits, &[(0, 1)]);
        let second = loss_for(&logits, &[(3, 4)]);
        let none = loss_for(&logits, &[]);
        let combined = first.0 + second.0 - none.0;
        assert!((both.0 - combined).abs() < 1e-5);
    }

    #[test]
    fn gold_out_of_range_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let start = g.constant(Tensor::zeros(&[2, 1]));
        let end = g.constant(Tensor::zeros(&[2, 1]));
        assert!(matches!(
            extraction_loss(&mut g, BoundaryLogits { start, end }, &[(1, 2)]),
            Err(ModelError::GoldOutOfRange { .. })
        ));
    }
}
