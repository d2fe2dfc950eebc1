//! Extractive baseline: decision labels appended to the input so every answer is a
//! span, chosen by softmax start and end heads.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, Var};
use crate::checkpoint::{Checkpoint, CheckpointError, Metadata};
use crate::decision::{Decision, ModelMove};
use crate::editor::{Editor, MAX_ALIGN_DISTANCE};
use crate::encoder::Encoder;
use crate::eval::{self, EvalReport, ScoredMove};
use crate::model::{eval_error, LossParts, ModelConfig, VOCAB_FILE};
use crate::nn::{Linear, ModelError};
use crate::par;
use crate::params::ParamStore;
use crate::sharc::{match_span, trim_clause, RawExample};
use crate::tensor::{self, Real};
use crate::text::{
    assemble_input, detokenize, join_tokens, tokenize, AssembledInput, DialogueState, TextError, TokenizedState, Vocabulary,
    LABEL_SEGMENT, RESERVED,
};

pub const BERTQA_FILE: &str = "bertqa.ckpt";
const LABELS: [Decision; 3] = [Decision::Yes, Decision::No, Decision::Irrelevant];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedInput {
    pub input: AssembledInput,
    /// Token range of each appended label, in yes, no, irrelevant order.
    pub label_ranges: [(Decision, Range<usize>); 3],
}

impl AugmentedInput {
    pub fn label_at(&self, position: usize) -> Option<Decision> {
        self.label_ranges
            .iter()
            .find(|(_, r)| r.contains(&position))
            .map(|(d, _)| *d)
    }
}

/// The dialogue layout followed by `yes [SEP] no [SEP] irrelevant [SEP]`.
pub fn build_augmented_input(
    state: &TokenizedState,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<AugmentedInput, TextError> {
    let reserved = 2 * LABELS.len();
    if max_len < reserved {
        return Err(TextError::MaxLenTooSmall(max_len));
    }
    let mut input = assemble_input(state, vocab, max_len - reserved)?;
    let ranges = LABELS.map(|d| {
        let at = input.len();
        input.push(d.label(), vocab.id(d.label()), LABEL_SEGMENT);
        input.push_sep(LABEL_SEGMENT);
        (d, at..at + 1)
    });
    Ok(AugmentedInput {
        input,
        label_ranges: ranges,
    })
}

/// Highest `s_i · e_j` with `j >= i`; ties go to the smallest `i`, then the smallest `j`.
pub fn extract_answer(s: &[Real], e: &[Real]) -> Option<(usize, usize, Real)> {
    let n = s.len().min(e.len());
    if n == 0 {
        return None;
    }
    let mut best_i = 0;
    let mut best: Option<(usize, usize, Real)> = None;
    for j in 0..n {
        if s[j] > s[best_i] {
            best_i = j;
        }
        // A zero end probability makes every start tie at zero.
        let i = if e[j] == 0.0 { 0 } else { best_i };
        let score = s[i] * e[j];
        let better = match best {
            None => true,
            Some((bi, _, bs)) => score > bs || (score == bs && i < bi),
        };
        if better {
            best = Some((i, j, score));
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaExample {
    pub id: String,
    pub state: DialogueState,
    pub tokens: TokenizedState,
    pub input: AugmentedInput,
    pub gold: Decision,
    pub gold_question: Option<String>,
    pub gold_span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPrediction {
    #[serde(rename = "move")]
    pub model_move: ModelMove,
    pub span: (usize, usize),
    pub score: Real,
}

#[derive(Debug, Clone)]
pub struct BertQa {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    encoder: Encoder,
    start: Linear,
    end: Linear,
}

impl BertQa {
    pub fn new(vocab: Vocabulary, config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.encoder.d_model;
        let encoder = Encoder::new(&mut store, "bertqa/encoder", vocab.len(), config.encoder, &mut rng)?;
        let start = Linear::new(&mut store, "bertqa/start", d, 1, &mut rng);
        let end = Linear::new(&mut store, "bertqa/end", d, 1, &mut rng);
        Ok(BertQa {
            config,
            vocab,
            store,
            encoder,
            start,
            end,
        })
    }

    pub fn augment(&self, tokens: &TokenizedState) -> Result<AugmentedInput, ModelError> {
        Ok(build_augmented_input(tokens, &self.vocab, self.config.max_len)?)
    }

    /// Gold span: the label token for decisions, the matched rule span for inquiries.
    /// `None` when an inquiry aligns poorly with the kept document.
    pub fn example(&self, raw: &RawExample) -> Result<Option<QaExample>, ModelError> {
        let state = raw.dialogue_state();
        let tokens = TokenizedState::new(&state);
        let input = self.augment(&tokens)?;
        let gold = raw.gold();
        let gold_span = match &gold.question {
            None => {
                let (_, r) = input
                    .label_ranges
                    .iter()
                    .find(|(d, _)| *d == gold.decision)
                    .expect("every final decision has a label");
                (r.start, r.end - 1)
            }
            Some(q) => {
                let range = input.input.document_range.clone();
                let doc = &tokens.document.tokens[..range.len()];
                let clause = trim_clause(&tokenize(q).tokens);
                let clause: Vec<&str> = clause.iter().map(String::as_str).collect();
                let doc: Vec<&str> = doc.iter().map(String::as_str).collect();
                let width = join_tokens(&clause).chars().count().max(1) as f64;
                match match_span(&doc, &clause) {
                    Some(m) if m.distance as f64 / width <= MAX_ALIGN_DISTANCE => {
                        (range.start + m.start, range.start + m.end)
                    }
                    _ => return Ok(None),
                }
            }
        };
        Ok(Some(QaExample {
            id: raw.utterance_id.clone(),
            state,
            tokens,
            input,
            gold: gold.decision,
            gold_question: gold.question,
            gold_span,
        }))
    }

    /// Start and end logits, each `[1 × n]`.
    pub fn logits(&self, g: &mut Graph, input: &AugmentedInput) -> Result<(Var, Var), ModelError> {
        let u = self.encoder.encode(g, &input.input)?.u;
        let n = input.input.len();
        let s = self.start.forward(g, u)?;
        let e = self.end.forward(g, u)?;
        Ok((g.reshape(s, &[1, n])?, g.reshape(e, &[1, n])?))
    }

    /// Cross-entropy on the gold start and end positions.
    pub fn example_loss(&self, g: &mut Graph, ex: &QaExample) -> Result<(Var, LossParts), ModelError> {
        let (s, e) = self.logits(g, &ex.input)?;
        let ls = g.log_softmax(s, 1)?;
        let le = g.log_softmax(e, 1)?;
        let ps = g.pick(ls, ex.gold_span.0)?;
        let pe = g.pick(le, ex.gold_span.1)?;
        let sum = g.add(ps, pe)?;
        let loss = g.scale(sum, -1.0);
        let value = g.value(loss).item() as f64;
        Ok((
            loss,
            LossParts {
                decision: value,
                extraction: 0.0,
                total: value,
                flagged: false,
            },
        ))
    }

    pub fn predict_tokens(
        &self,
        state: &DialogueState,
        tokens: &TokenizedState,
        input: &AugmentedInput,
        editor: Option<&Editor>,
    ) -> Result<QaPrediction, ModelError> {
        let mut g = Graph::new(&self.store, Mode::Eval);
        let (s, e) = self.logits(&mut g, input)?;
        let ps = tensor::softmax(g.value(s).data());
        let pe = tensor::softmax(g.value(e).data());
        let (i, j, score) = extract_answer(&ps, &pe).expect("non-empty input");
        let model_move = match input.label_at(i) {
            Some(decision) => ModelMove {
                decision,
                rule_index: None,
                question: None,
            },
            None => {
                let doc = &input.input.document_range;
                let question = if doc.contains(&i) && doc.contains(&j) {
                    let (a, b) = (i - doc.start, j - doc.start);
                    match editor {
                        Some(ed) => ed.edit(&tokens.document.tokens[a..=b], &tokens.document.tokens, &self.vocab)?.question,
                        None => {
                            let (lo, hi) = tokens.document.span_offsets(a, b);
                            state.snippet[lo..hi].to_string()
                        }
                    }
                } else {
                    let words: Vec<&str> = input.input.tokens[i..=j]
                        .iter()
                        .map(String::as_str)
                        .filter(|t| !RESERVED.contains(t))
                        .collect();
                    detokenize(&words)
                };
                ModelMove {
                    decision: Decision::Inquire,
                    rule_index: None,
                    question: Some(question),
                }
            }
        };
        Ok(QaPrediction {
            model_move,
            span: (i, j),
            score,
        })
    }

    pub fn predict(&self, state: &DialogueState, editor: Option<&Editor>) -> Result<QaPrediction, ModelError> {
        let tokens = TokenizedState::new(state);
        let input = self.augment(&tokens)?;
        self.predict_tokens(state, &tokens, &input, editor)
    }

    pub fn evaluate(
        &self,
        examples: &[QaExample],
        editor: Option<&Editor>,
    ) -> Result<(EvalReport, Vec<QaPrediction>), ModelError> {
        let preds = par::map(examples, |ex| self.predict_tokens(&ex.state, &ex.tokens, &ex.input, editor))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        let moves: Vec<ScoredMove> = examples
            .iter()
            .zip(&preds)
            .map(|(ex, p)| ScoredMove {
                gold: ex.gold,
                gold_question: ex.gold_question.clone(),
                predicted: p.model_move.decision,
                predicted_question: p.model_move.question.clone(),
            })
            .collect();
        Ok((eval::evaluate_moves(&moves).map_err(eval_error)?, preds))
    }

    pub fn save_dir(&self, dir: &Path, step_count: u64) -> Result<(), ModelError> {
        fs::create_dir_all(dir).map_err(CheckpointError::from)?;
        self.vocab.save(&dir.join(VOCAB_FILE)).map_err(CheckpointError::from)?;
        Checkpoint::from_store(
            &self.store,
            Metadata {
                vocab_hash: self.vocab.hash(),
                hyperparameters: serde_json::to_value(self.config).expect("config serializes"),
                step_count,
            },
        )
        .save(&dir.join(BERTQA_FILE))?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self, ModelError> {
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let ckpt = Checkpoint::load(&dir.join(BERTQA_FILE))?;
        if ckpt.metadata.vocab_hash != vocab.hash() {
            return Err(CheckpointError::VocabMismatch {
                checkpoint: ckpt.metadata.vocab_hash.clone(),
                vocabulary: vocab.hash(),
            }
            .into());
        }
        let config = serde_json::from_value(ckpt.metadata.hyperparameters.clone()).map_err(CheckpointError::from)?;
        let mut model = BertQa::new(vocab, config)?;
        ckpt.apply_to(&mut model.store)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::sharc::HistoryEntry;

    #[test]
    fn answer_examples() {
        let (i, j, s) = extract_answer(&[0.6, 0.3, 0.1], &[0.2, 0.7, 0.1]).unwrap();
        assert_eq!((i, j), (0, 1));
        assert!((s - 0.42).abs() < 1e-6);
        assert_eq!(extract_answer(&[1.0], &[1.0]).map(|(i, j, _)| (i, j)), Some((0, 0)));
        assert_eq!(extract_answer(&[0.5, 0.5], &[0.5, 0.5]).map(|(i, j, _)| (i, j)), Some((0, 0)));
        assert!(extract_answer(&[], &[]).is_none());
    }

    fn raw(answer: &str) -> RawExample {
        RawExample {
            utterance_id: "u".into(),
            tree_id: "t".into(),
            snippet: "You qualify if you are:\n* a uk resident\n* over 60".into(),
            question: "Do I qualify?".into(),
            scenario: String::new(),
            history: vec![HistoryEntry {
                follow_up_question: "Are you over 60?".into(),
                follow_up_answer: "Yes".into(),
            }],
            answer: answer.into(),
        }
    }

    fn model() -> BertQa {
        let r = raw("x");
        let vocab = Vocabulary::build([r.snippet.as_str(), "yes no irrelevant"]);
        let config = ModelConfig {
            encoder: EncoderConfig {
                d_model: 8,
                layers: 1,
                heads: 2,
                ff_width: 16,
                dropout: 0.0,
                max_position: 64,
            },
            max_len: 64,
            ..ModelConfig::default()
        };
        BertQa::new(vocab, config).unwrap()
    }

    #[test]
    fn gold_spans_follow_the_answer() {
        let m = model();
        let yes = m.example(&raw("Yes")).unwrap().unwrap();
        let (d, r) = &yes.input.label_ranges[0];
        assert_eq!(*d, Decision::Yes);
        assert_eq!(yes.gold_span, (r.start, r.start));
        assert_eq!(yes.input.input.tokens[r.start], "yes");
        let dialogue_end = yes.input.label_ranges[0].1.start;
        assert!(yes.input.input.segment_ids[..dialogue_end].iter().all(|&s| s != LABEL_SEGMENT));

        let inq = m.example(&raw("Are you a UK resident?")).unwrap().unwrap();
        let (i, j) = inq.gold_span;
        assert_eq!(inq.input.input.tokens[i..=j], ["uk", "resident"]);
        assert!(m.example(&raw("Do you own a boat?")).unwrap().is_none());
    }

    #[test]
    fn probabilities_sum_to_one_and_decode() {
        let m = model();
        let ex = m.example(&raw("Yes")).unwrap().unwrap();
        let mut g = Graph::new(&m.store, Mode::Eval);
        let (s, e) = m.logits(&mut g, &ex.input).unwrap();
        for v in [s, e] {
            let p = tensor::softmax(g.value(v).data());
            assert!((p.iter().sum::<Real>() - 1.0).abs() < 1e-6);
        }
        let p = m.predict(&ex.state, None).unwrap();
        match ex.input.label_at(p.span.0) {
            Some(d) => assert_eq!(p.model_move.decision, d),
            None => assert!(p.model_move.question.is_some()),
        }
    }
}
