//! Follow-up question editor: wraps a rule span with generated pre-span and
//! post-span tokens using two attentive LSTM decoders with tied embeddings.

use std::collections::HashMap;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, Var};
use crate::encoder::{Encoder, EncoderConfig};
use crate::nn::{Linear, ModelError};
use crate::params::{ParamId, ParamStore};
use crate::sharc::match_span;
use crate::tensor::{self, Real, Tensor};
use crate::text::{self, join_tokens, Vocabulary, CLS, DOCUMENT_SEGMENT, QUESTION_SEGMENT, RESERVED, SEP};

const TAG_LEXICON: &str = include_str!("../resources/tag_lexicon.txt");

pub const DEFAULT_MAX_DECODE: usize = 30;
/// Largest normalized character distance at which a span still aligns with a gold question.
pub const MAX_ALIGN_DISTANCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Adposition,
    Auxiliary,
    Conjunction,
    Determiner,
    Punctuation,
}

fn lexicon() -> &'static HashMap<&'static str, Tag> {
    static LEXICON: OnceLock<HashMap<&'static str, Tag>> = OnceLock::new();
    LEXICON.get_or_init(|| {
        TAG_LEXICON
            .lines()
            .filter_map(|line| {
                let (word, tag) = line.split_once('\t')?;
                let tag = match tag.trim() {
                    "adposition" => Tag::Adposition,
                    "auxiliary" => Tag::Auxiliary,
                    "conjunction" => Tag::Conjunction,
                    "determiner" => Tag::Determiner,
                    "punctuation" => Tag::Punctuation,
                    _ => return None,
                };
                Some((word, tag))
            })
            .collect()
    })
}

/// Lexicon tag of a token; `None` for content words.
pub fn tag_of(token: &str) -> Option<Tag> {
    lexicon().get(token).copied().or_else(|| {
        text::is_punctuation_token(token).then_some(Tag::Punctuation)
    })
}

/// Strips leading and trailing function words and punctuation, keeping at least one token.
pub fn trim_rule<S: AsRef<str>>(span: &[S]) -> Vec<String> {
    let mut lo = 0;
    let mut hi = span.len();
    while hi - lo > 1 && tag_of(span[lo].as_ref()).is_some() {
        lo += 1;
    }
    while hi - lo > 1 && tag_of(span[hi - 1].as_ref()).is_some() {
        hi -= 1;
    }
    span[lo..hi].iter().map(|s| s.as_ref().to_string()).collect()
}

/// Question text from the three parts, with punctuation attached to the preceding word.
pub fn compose<S: AsRef<str>>(pre: &[S], span: &[S], post: &[S]) -> String {
    let all: Vec<&str> = pre
        .iter()
        .chain(span)
        .chain(post)
        .map(AsRef::as_ref)
        .collect();
    text::detokenize(&all)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Pre,
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditorConfig {
    pub encoder: EncoderConfig,
    pub embed_dim: usize,
    pub max_decode: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for EditorConfig {
    fn default() -> Self {
        EditorConfig {
            encoder: EncoderConfig {
                dropout: 0.1,
                ..EncoderConfig::default()
            },
            embed_dim: 64,
            max_decode: DEFAULT_MAX_DECODE,
            dropout: 0.4,
            seed: 13,
        }
    }
}

/// `[CLS] span [SEP] document [SEP]` as ids; the document is cut to fit, the span never.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditInput {
    pub span: Vec<String>,
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
}

impl EditInput {
    pub fn new<A: AsRef<str>, B: AsRef<str>>(
        span: &[A],
        document: &[B],
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<Self, ModelError> {
        let fixed = span.len() + 3;
        if fixed > max_len {
            return Err(ModelError::InputTooLong { len: fixed, max: max_len });
        }
        let doc_len = document.len().min(max_len - fixed);
        let mut token_ids = vec![CLS];
        let mut segment_ids = vec![QUESTION_SEGMENT];
        token_ids.extend(span.iter().map(|t| vocab.id(t.as_ref())));
        token_ids.push(SEP);
        segment_ids.resize(token_ids.len(), QUESTION_SEGMENT);
        token_ids.extend(document[..doc_len].iter().map(|t| vocab.id(t.as_ref())));
        token_ids.push(SEP);
        segment_ids.resize(token_ids.len(), DOCUMENT_SEGMENT);
        let position_ids = (0..token_ids.len()).collect();
        Ok(EditInput {
            span: span.iter().map(|s| s.as_ref().to_string()).collect(),
            token_ids,
            segment_ids,
            position_ids,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Decoder {
    input: Linear,
    recurrent: Linear,
    output: Linear,
}

impl Decoder {
    fn new(store: &mut ParamStore, prefix: &str, d_v: usize, d_u: usize, rng: &mut ChaCha8Rng) -> Self {
        Decoder {
            input: Linear::new(store, &format!("{prefix}/input"), d_v + d_u, 4 * d_u, rng),
            recurrent: Linear::new(store, &format!("{prefix}/recurrent"), d_u, 4 * d_u, rng),
            output: Linear::new(store, &format!("{prefix}/output"), 2 * d_u, d_v, rng),
        }
    }
}

/// Per-graph handles reused by every decoding step.
struct StepContext {
    u: Var,
    ut: Var,
    table: Var,
    table_t: Var,
    rate: Real,
}

/// Tokens produced by greedy decoding with the distribution at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub ids: Vec<usize>,
    pub distributions: Vec<Vec<Real>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResult {
    pub pre: Vec<String>,
    pub span: Vec<String>,
    pub post: Vec<String>,
    pub question: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditExample {
    /// Trimmed rule span.
    pub span: Vec<String>,
    pub document: Vec<String>,
    pub pre: Vec<String>,
    pub post: Vec<String>,
}

impl EditExample {
    /// Aligns the trimmed span inside the gold question; text before and after the
    /// match become the pre and post targets. `None` when the alignment is poor or a
    /// target exceeds `max_decode` (end token included).
    pub fn derive<S: AsRef<str>>(
        span: &[S],
        document: &[S],
        question: &[S],
        max_decode: usize,
    ) -> Option<Self> {
        if span.is_empty() {
            return None;
        }
        let trimmed = trim_rule(span);
        let q: Vec<String> = question.iter().map(|s| s.as_ref().to_string()).collect();
        let m = match_span(&q, &trimmed)?;
        let norm = m.distance as f64 / join_tokens(&trimmed).chars().count() as f64;
        if norm > MAX_ALIGN_DISTANCE {
            return None;
        }
        let pre = q[..m.start].to_vec();
        let post = q[m.end + 1..].to_vec();
        if pre.len() + 1 > max_decode || post.len() + 1 > max_decode {
            return None;
        }
        Some(EditExample {
            span: trimmed,
            document: document.iter().map(|s| s.as_ref().to_string()).collect(),
            pre,
            post,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Editor {
    pub config: EditorConfig,
    pub store: ParamStore,
    encoder: Encoder,
    embedding: ParamId,
    pre: Decoder,
    post: Decoder,
}

impl Editor {
    pub fn new(vocab_size: usize, config: EditorConfig) -> Result<Self, ModelError> {
        if !(0.0..1.0).contains(&config.dropout) || config.embed_dim == 0 {
            return Err(ModelError::Config("editor dropout or embedding width invalid".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, "editor/encoder", vocab_size, config.encoder, &mut rng)?;
        let d_u = config.encoder.d_model;
        let d_v = config.embed_dim;
        let embedding = store.add_uniform("editor/embedding".to_string(), &[vocab_size, d_v], &mut rng);
        let pre = Decoder::new(&mut store, "editor/pre", d_v, d_u, &mut rng);
        let post = Decoder::new(&mut store, "editor/post", d_v, d_u, &mut rng);
        Ok(Editor {
            config,
            store,
            encoder,
            embedding,
            pre,
            post,
        })
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embedding
    }

    pub fn input<A: AsRef<str>, B: AsRef<str>>(
        &self,
        span: &[A],
        document: &[B],
        vocab: &Vocabulary,
    ) -> Result<EditInput, ModelError> {
        EditInput::new(span, document, vocab, self.config.encoder.max_position)
    }

    /// `U_edit`, one row per input token.
    pub fn encode_edit(&self, g: &mut Graph, input: &EditInput) -> Result<Var, ModelError> {
        Ok(self
            .encoder
            .encode_ids(g, &input.token_ids, &input.segment_ids, &input.position_ids)?
            .u)
    }

    fn context(&self, g: &mut Graph, u: Var) -> Result<StepContext, ModelError> {
        let ut = g.transpose(u)?;
        let table = g.param(self.embedding);
        let table_t = g.transpose(table)?;
        Ok(StepContext {
            u,
            ut,
            table,
            table_t,
            rate: self.config.dropout as Real,
        })
    }

    fn initial_state(&self, g: &mut Graph, u: Var) -> Result<(Var, Var), ModelError> {
        let h = g.mean_rows(u)?;
        let c = g.constant(Tensor::zeros(&[1, self.config.encoder.d_model]));
        Ok((h, c))
    }

    /// One decoder step. Returns the new (h, c) and the `[1 × n_V]` output logits.
    fn step(
        &self,
        g: &mut Graph,
        ctx: &StepContext,
        dec: &Decoder,
        h: Var,
        c: Var,
        prev: usize,
    ) -> Result<(Var, Var, Var), ModelError> {
        let d = self.config.encoder.d_model;
        let v = g.embedding(ctx.table, &[prev])?;
        let scores = g.matmul(h, ctx.ut)?;
        let zeta = g.softmax(scores, 1)?;
        let a = g.matmul(zeta, ctx.u)?;
        let a = g.dropout(a, ctx.rate)?;
        let x = g.concat(&[v, a], 1)?;
        let gi = dec.input.forward(g, x)?;
        let gh = dec.recurrent.forward(g, h)?;
        let gates = g.add(gi, gh)?;
        let i = g.slice(gates, 1, 0, d)?;
        let f = g.slice(gates, 1, d, 2 * d)?;
        let cand = g.slice(gates, 1, 2 * d, 3 * d)?;
        let o = g.slice(gates, 1, 3 * d, 4 * d)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        let ha = g.concat(&[h, a], 1)?;
        let out = dec.output.forward(g, ha)?;
        let logits = g.matmul(out, ctx.table_t)?;
        Ok((h, c, logits))
    }

    fn decoder(&self, mode: DecodeMode) -> &Decoder {
        match mode {
            DecodeMode::Pre => &self.pre,
            DecodeMode::Post => &self.post,
        }
    }

    /// Greedy decoding until the end token or `max_len` tokens.
    pub fn decode(
        &self,
        g: &mut Graph,
        u: Var,
        mode: DecodeMode,
        max_len: usize,
    ) -> Result<Decoded, ModelError> {
        let ctx = self.context(g, u)?;
        let dec = *self.decoder(mode);
        let (mut h, mut c) = self.initial_state(g, u)?;
        let mut prev = CLS;
        let mut out = Decoded {
            ids: Vec::new(),
            distributions: Vec::new(),
        };
        for _ in 0..max_len {
            let (nh, nc, logits) = self.step(g, &ctx, &dec, h, c, prev)?;
            h = nh;
            c = nc;
            let p = tensor::softmax(g.value(logits).data());
            let w = tensor::argmax(&p).expect("non-empty vocabulary");
            out.distributions.push(p);
            if w == SEP {
                break;
            }
            out.ids.push(w);
            prev = w;
        }
        Ok(out)
    }

    /// Summed negative log-likelihood of `gold` followed by the end token, under teacher forcing.
    pub fn sequence_loss(
        &self,
        g: &mut Graph,
        u: Var,
        mode: DecodeMode,
        gold: &[usize],
    ) -> Result<Var, ModelError> {
        let ctx = self.context(g, u)?;
        let dec = *self.decoder(mode);
        let (mut h, mut c) = self.initial_state(g, u)?;
        let mut prev = CLS;
        let mut total: Option<Var> = None;
        for &target in gold.iter().chain(std::iter::once(&SEP)) {
            let (nh, nc, logits) = self.step(g, &ctx, &dec, h, c, prev)?;
            h = nh;
            c = nc;
            let logp = g.log_softmax(logits, 1)?;
            let term = g.pick(logp, target)?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
            prev = target;
        }
        let total = total.expect("at least the end token");
        Ok(g.scale(total, -1.0))
    }

    /// `L_edit = L_pre + L_post`; returns (total, pre, post).
    pub fn edit_loss(
        &self,
        g: &mut Graph,
        u: Var,
        gold_pre: &[usize],
        gold_post: &[usize],
    ) -> Result<(Var, Var, Var), ModelError> {
        let pre = self.sequence_loss(g, u, DecodeMode::Pre, gold_pre)?;
        let post = self.sequence_loss(g, u, DecodeMode::Post, gold_post)?;
        Ok((g.add(pre, post)?, pre, post))
    }

    /// Loss of one training example in a graph over this editor's parameters.
    pub fn example_loss(
        &self,
        g: &mut Graph,
        example: &EditExample,
        vocab: &Vocabulary,
    ) -> Result<Var, ModelError> {
        let input = self.input(&example.span, &example.document, vocab)?;
        let u = self.encode_edit(g, &input)?;
        let (total, _, _) = self.edit_loss(g, u, &vocab.ids(&example.pre), &vocab.ids(&example.post))?;
        Ok(total)
    }

    /// Trims the span, decodes both sides greedily and composes the question.
    pub fn edit<S: AsRef<str>>(
        &self,
        span: &[S],
        document: &[S],
        vocab: &Vocabulary,
    ) -> Result<EditResult, ModelError> {
        let trimmed = trim_rule(span);
        let input = self.input(&trimmed, document, vocab)?;
        let mut g = Graph::new(&self.store, Mode::Eval);
        let u = self.encode_edit(&mut g, &input)?;
        let words = |ids: Vec<usize>| -> Vec<String> {
            ids.into_iter()
                .filter(|&i| i >= RESERVED.len())
                .map(|i| vocab.token(i).to_string())
                .collect()
        };
        let pre = words(self.decode(&mut g, u, DecodeMode::Pre, self.config.max_decode)?.ids);
        let post = words(self.decode(&mut g, u, DecodeMode::Post, self.config.max_decode)?.ids);
        let question = compose(&pre, &trimmed, &post);
        Ok(EditResult {
            pre,
            span: trimmed,
            post,
            question,
        })
    }
}
