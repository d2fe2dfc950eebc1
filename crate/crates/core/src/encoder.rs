//! Trainable transformer encoder producing one vector per input token.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::nn::{LayerNorm, Linear, ModelError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;
use crate::text::{AssembledInput, NUM_SEGMENTS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub dropout: f64,
    pub max_position: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 128,
            layers: 2,
            heads: 4,
            ff_width: 256,
            dropout: 0.4,
            max_position: 512,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.ff_width == 0 || self.max_position == 0 {
            return Err(ModelError::Config("ff_width and max_position must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    attn_norm: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    ff_norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    token_embedding: ParamId,
    position_embedding: ParamId,
    segment_embedding: ParamId,
    embedding_norm: LayerNorm,
    blocks: Vec<Block>,
}

/// Encoder output plus the per-layer, per-head attention matrices (`[n × n]`).
pub struct Encoded {
    pub u: Var,
    pub attention: Vec<Var>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        config: EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let token_embedding = store.add_uniform(format!("{prefix}/token_embedding"), &[vocab_size, d], rng);
        let position_embedding =
            store.add_uniform(format!("{prefix}/position_embedding"), &[config.max_position, d], rng);
        let segment_embedding =
            store.add_uniform(format!("{prefix}/segment_embedding"), &[NUM_SEGMENTS, d], rng);
        let embedding_norm = LayerNorm::new(store, &format!("{prefix}/embedding_norm"), d);
        let blocks = (0..config.layers)
            .map(|l| {
                let p = format!("{prefix}/layer{l}");
                Block {
                    query: Linear::new(store, &format!("{p}/query"), d, d, rng),
                    key: Linear::new(store, &format!("{p}/key"), d, d, rng),
                    value: Linear::new(store, &format!("{p}/value"), d, d, rng),
                    output: Linear::new(store, &format!("{p}/output"), d, d, rng),
                    attn_norm: LayerNorm::new(store, &format!("{p}/attn_norm"), d),
                    ff_in: Linear::new(store, &format!("{p}/ff_in"), d, config.ff_width, rng),
                    ff_out: Linear::new(store, &format!("{p}/ff_out"), config.ff_width, d, rng),
                    ff_norm: LayerNorm::new(store, &format!("{p}/ff_norm"), d),
                }
            })
            .collect();
        Ok(Encoder {
            config,
            token_embedding,
            position_embedding,
            segment_embedding,
            embedding_norm,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn encode(&self, g: &mut Graph, input: &AssembledInput) -> Result<Encoded, ModelError> {
        self.encode_ids(g, &input.token_ids, &input.segment_ids, &input.position_ids)
    }

    /// Returns `U` (`[n × d_model]`). Dropout (encoder rate) is active only in training graphs.
    pub fn encode_ids(
        &self,
        g: &mut Graph,
        token_ids: &[usize],
        segment_ids: &[usize],
        position_ids: &[usize],
    ) -> Result<Encoded, ModelError> {
        let n = token_ids.len();
        let max = self.config.max_position;
        if n > max || position_ids.iter().any(|&p| p >= max) {
            return Err(ModelError::InputTooLong { len: n, max });
        }
        let rate = self.config.dropout as Real;
        let tok_table = g.param(self.token_embedding);
        let pos_table = g.param(self.position_embedding);
        let seg_table = g.param(self.segment_embedding);
        let tok = g.embedding(tok_table, token_ids)?;
        let pos = g.embedding(pos_table, position_ids)?;
        let seg = g.embedding(seg_table, segment_ids)?;
        let sum = g.add(tok, pos)?;
        let sum = g.add(sum, seg)?;
        let mut x = self.embedding_norm.forward(g, sum)?;
        x = g.dropout(x, rate)?;

        let heads = self.config.heads;
        let dk = self.config.d_model / heads;
        let inv_sqrt = 1.0 / (dk as Real).sqrt();
        let mut attention = Vec::with_capacity(self.blocks.len() * heads);
        for block in &self.blocks {
            let q = block.query.forward(g, x)?;
            let k = block.key.forward(g, x)?;
            let v = block.value.forward(g, x)?;
            let mut head_outputs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = g.slice(q, 1, h * dk, (h + 1) * dk)?;
                let kh = g.slice(k, 1, h * dk, (h + 1) * dk)?;
                let vh = g.slice(v, 1, h * dk, (h + 1) * dk)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, inv_sqrt);
                let probs = g.softmax(scores, 1)?;
                attention.push(probs);
                let probs = g.dropout(probs, rate)?;
                head_outputs.push(g.matmul(probs, vh)?);
            }
            let merged = g.concat(&head_outputs, 1)?;
            let attn_out = block.output.forward(g, merged)?;
            let attn_out = g.dropout(attn_out, rate)?;
            let res = g.add(x, attn_out)?;
            x = block.attn_norm.forward(g, res)?;

            let hidden = block.ff_in.forward(g, x)?;
            let hidden = g.relu(hidden);
            let ff = block.ff_out.forward(g, hidden)?;
            let ff = g.dropout(ff, rate)?;
            let res = g.add(x, ff)?;
            x = block.ff_norm.forward(g, res)?;
        }
        let u = g.dropout(x, rate)?;
        Ok(Encoded { u, attention })
    }
}
