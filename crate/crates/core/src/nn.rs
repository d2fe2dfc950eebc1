//! Small layer building blocks shared by the neural modules.

use rand::Rng;
use thiserror::Error;

use crate::autograd::{Graph, Var};
use crate::checkpoint::CheckpointError;
use crate::params::{ParamId, ParamStore};
use crate::tensor::TensorError;
use crate::text::TextError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("input of {len} tokens exceeds the maximum position {max}")]
    InputTooLong { len: usize, max: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("rule span has no pooled representation")]
    MissingPooled,
    #[error("gold span ({start}, {end}) outside a document of {len} tokens")]
    GoldOutOfRange { start: usize, end: usize, len: usize },
    #[error("{0}")]
    Data(String),
}

/// `x · W + b` with `W: [input × output]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            weight: store.add_uniform(format!("{name}/weight"), &[input, output], rng),
            bias: store.add_zeros(format!("{name}/bias"), &[output]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, TensorError> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.affine(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.add_ones(format!("{name}/gain"), &[width]),
            bias: store.add_zeros(format!("{name}/bias"), &[width]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, TensorError> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Softmax self-attention pooling over the rows of `rows` (`[n × d]`).
///
/// Returns the pooled `[1 × d]` vector and the `[n × 1]` attention weights.
pub fn attention_pool(g: &mut Graph, scorer: &Linear, rows: Var) -> Result<(Var, Var), TensorError> {
    let logits = scorer.forward(g, rows)?;
    let weights = g.softmax(logits, 0)?;
    let wt = g.transpose(weights)?;
    let pooled = g.matmul(wt, rows)?;
    Ok((pooled, weights))
}
