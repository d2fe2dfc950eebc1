//! The full rule reader: encode, extract rule spans, score entailment, decide,
//! and optionally edit the chosen span into a question.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, Var};
use crate::checkpoint::{Checkpoint, CheckpointError, Metadata};
use crate::decision::{self, Decision, DecisionHead, ModelMove, ScoreVars};
use crate::editor::Editor;
use crate::encoder::{Encoder, EncoderConfig};
use crate::entailment::{entail_scores, enrich_var, overlap_f1};
use crate::eval::{self, EvalError, EvalReport, ScoredMove, SpanScore};
use crate::extraction::{self, BoundaryLogits, BoundaryScores, ExtractionHead, DEFAULT_TAU};
use crate::nn::ModelError;
use crate::par;
use crate::params::ParamStore;
use crate::sharc::{bullet_spans, dedup_spans, RawExample, SupervisedSpan};
use crate::tensor::Real;
use crate::text::{assemble_input, tokenize, AssembledInput, DialogueState, TokenizedState, Vocabulary, DEFAULT_MAX_LEN};

pub const MODEL_FILE: &str = "model.ckpt";
pub const EDITOR_FILE: &str = "editor.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub max_len: usize,
    pub tau: f64,
    /// Add `*`-bullet spans to the extracted rules at inference.
    pub bullet_rules: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            max_len: DEFAULT_MAX_LEN,
            tau: DEFAULT_TAU,
            bullet_rules: true,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        if self.max_len > self.encoder.max_position {
            return Err(ModelError::Config(format!(
                "max_len {} exceeds max_position {}",
                self.max_len, self.encoder.max_position
            )));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(ModelError::Config(format!("tau {} outside [0, 1)", self.tau)));
        }
        Ok(())
    }
}

/// A dialogue state tokenized and laid out for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTurn {
    pub state: DialogueState,
    pub tokens: TokenizedState,
    pub input: AssembledInput,
    /// Bullet spans inside the kept part of the document.
    pub bullets: Vec<(usize, usize)>,
}

impl PreparedTurn {
    /// Number of document tokens that survived truncation.
    pub fn doc_len(&self) -> usize {
        self.input.document_range.len()
    }

    pub fn span_tokens(&self, start: usize, end: usize) -> &[String] {
        &self.tokens.document.tokens[start..=end]
    }

    /// Snippet text covering document tokens `start..=end`.
    pub fn span_text(&self, start: usize, end: usize) -> &str {
        let (lo, hi) = self.tokens.document.span_offsets(start, end);
        &self.state.snippet[lo..hi]
    }

    /// Scenario and history entailment scores of a span.
    pub fn entailment(&self, start: usize, end: usize) -> (f64, f64) {
        let inquiries: Vec<&[String]> = self.tokens.history.iter().map(|(q, _)| q.tokens.as_slice()).collect();
        entail_scores(self.span_tokens(start, end), &self.tokens.scenario.tokens, &inquiries)
    }
}

/// One rule as reported to callers: token and character bounds plus the three scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainedRule {
    pub start: usize,
    pub end: usize,
    pub char_start: usize,
    pub char_end: usize,
    pub text: String,
    pub g: Real,
    pub h: Real,
    pub r: Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "move")]
    pub model_move: ModelMove,
    pub rules: Vec<ExplainedRule>,
    pub z: [Real; 4],
    /// Spans from boundary pairing alone, before bullets are added.
    pub extracted: Vec<(usize, usize)>,
}

/// Graph handles and values from one forward pass.
pub struct TurnGraph {
    pub logits: BoundaryLogits,
    pub boundaries: BoundaryScores,
    pub rules: Vec<(usize, usize)>,
    pub entailment: Vec<(f64, f64)>,
    pub summary: Var,
    pub scores: ScoreVars,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    pub turn: PreparedTurn,
    pub gold: Decision,
    pub gold_question: Option<String>,
    pub gold_spans: Vec<(usize, usize)>,
    pub gold_rule: Option<usize>,
}

/// Per-example loss values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub decision: f64,
    pub extraction: f64,
    pub total: f64,
    /// Gold inquire with no rule to point at.
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct RuleReader {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    encoder: Encoder,
    extraction: ExtractionHead,
    decision: DecisionHead,
}

impl RuleReader {
    pub fn new(vocab: Vocabulary, config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.encoder.d_model;
        let encoder = Encoder::new(&mut store, "encoder", vocab.len(), config.encoder, &mut rng)?;
        let extraction = ExtractionHead::new(&mut store, "extract", d, &mut rng);
        let decision = DecisionHead::new(&mut store, "decide", d, &mut rng);
        Ok(RuleReader {
            config,
            vocab,
            store,
            encoder,
            extraction,
            decision,
        })
    }

    pub fn prepare(&self, state: &DialogueState) -> Result<PreparedTurn, ModelError> {
        let tokens = TokenizedState::new(state);
        let input = assemble_input(&tokens, &self.vocab, self.config.max_len)?;
        let doc_len = input.document_range.len();
        let bullets = bullet_spans(&state.snippet, &tokens.document)
            .into_iter()
            .filter(|&(_, e)| e < doc_len)
            .collect();
        Ok(PreparedTurn {
            state: state.clone(),
            tokens,
            input,
            bullets,
        })
    }

    /// Rules used at inference: paired boundaries plus bullets when enabled, deduplicated.
    pub fn inference_rules(&self, turn: &PreparedTurn, boundaries: &BoundaryScores) -> Vec<(usize, usize)> {
        let mut spans = extraction::pair_spans(boundaries, self.config.tau);
        if self.config.bullet_rules {
            spans.extend(turn.bullets.iter().copied());
        }
        dedup_spans(&spans, |&s| s)
    }

    /// Runs the network. `rules` fixes the rule set (training); otherwise it is inferred.
    pub fn forward(
        &self,
        g: &mut Graph,
        turn: &PreparedTurn,
        rules: Option<&[(usize, usize)]>,
    ) -> Result<TurnGraph, ModelError> {
        let encoded = self.encoder.encode(g, &turn.input)?;
        let range = turn.input.document_range.clone();
        let u_doc = g.slice(encoded.u, 0, range.start, range.end)?;
        let (logits, boundaries) = self.extraction.score_boundaries(g, u_doc)?;
        let rules = match rules {
            Some(r) => r.to_vec(),
            None => self.inference_rules(turn, &boundaries),
        };
        let mut enriched = Vec::with_capacity(rules.len());
        let mut entailment = Vec::with_capacity(rules.len());
        for &(s, e) in &rules {
            let (pooled, _) = self.extraction.pool_span(g, u_doc, s, e)?;
            let (gs, hs) = turn.entailment(s, e);
            enriched.push(enrich_var(g, pooled, gs as Real, hs as Real)?);
            entailment.push((gs, hs));
        }
        let (summary, _) = self.decision.summarize(g, encoded.u)?;
        let scores = self.decision.score(g, summary, &enriched)?;
        Ok(TurnGraph {
            logits,
            boundaries,
            rules,
            entailment,
            summary,
            scores,
        })
    }

    /// Builds the graph for `L_dec + lambda · L_re` on one example.
    pub fn example_loss(
        &self,
        g: &mut Graph,
        ex: &TrainingExample,
        lambda: f64,
    ) -> Result<(Var, LossParts), ModelError> {
        let out = self.forward(g, &ex.turn, Some(&ex.gold_spans))?;
        let (l_dec, flagged) = decision::decision_loss(g, out.scores, ex.gold, ex.gold_rule)?;
        let l_re = extraction::extraction_loss(g, out.logits, &ex.gold_spans)?;
        let weighted = g.scale(l_re, lambda as Real);
        let total = g.add(l_dec, weighted)?;
        let parts = LossParts {
            decision: g.value(l_dec).item() as f64,
            extraction: g.value(l_re).item() as f64,
            total: g.value(total).item() as f64,
            flagged,
        };
        Ok((total, parts))
    }

    pub fn predict(&self, state: &DialogueState, editor: Option<&Editor>) -> Result<Prediction, ModelError> {
        let turn = self.prepare(state)?;
        self.predict_prepared(&turn, editor)
    }

    pub fn predict_prepared(&self, turn: &PreparedTurn, editor: Option<&Editor>) -> Result<Prediction, ModelError> {
        let mut g = Graph::new(&self.store, Mode::Eval);
        let out = self.forward(&mut g, turn, None)?;
        let values = decision::output_values(&g, out.summary, out.scores);
        let mut model_move = decision::infer(&values);
        if let Some(i) = model_move.rule_index {
            let (s, e) = out.rules[i];
            model_move.question = Some(match editor {
                Some(ed) => ed.edit(turn.span_tokens(s, e), &turn.tokens.document.tokens, &self.vocab)?.question,
                None => turn.span_text(s, e).to_string(),
            });
        }
        let rules = out
            .rules
            .iter()
            .zip(&out.entailment)
            .zip(&values.r)
            .map(|((&(s, e), &(gs, hs)), &r)| {
                let (char_start, char_end) = turn.tokens.document.span_offsets(s, e);
                ExplainedRule {
                    start: s,
                    end: e,
                    char_start,
                    char_end,
                    text: turn.span_text(s, e).to_string(),
                    g: gs as Real,
                    h: hs as Real,
                    r,
                }
            })
            .collect();
        Ok(Prediction {
            model_move,
            rules,
            z: values.z,
            extracted: extraction::pair_spans(&out.boundaries, self.config.tau),
        })
    }

    /// Attaches gold supervision. Spans beyond the kept document are dropped; the gold
    /// rule of an inquiry is the span with the highest token-overlap F1 to the gold question.
    pub fn training_example(
        &self,
        raw: &RawExample,
        spans: &[SupervisedSpan],
    ) -> Result<TrainingExample, ModelError> {
        let turn = self.prepare(&raw.dialogue_state())?;
        let doc_len = turn.doc_len();
        let gold_spans: Vec<(usize, usize)> = spans
            .iter()
            .map(|s| (s.start, s.end))
            .filter(|&(_, e)| e < doc_len)
            .collect();
        let gold = raw.gold();
        let gold_rule = match &gold.question {
            Some(q) if !gold_spans.is_empty() => {
                let q = tokenize(q).tokens;
                let mut best = 0;
                let mut best_f1 = f64::NEG_INFINITY;
                for (i, &(s, e)) in gold_spans.iter().enumerate() {
                    let f = overlap_f1(turn.span_tokens(s, e), &q);
                    if f > best_f1 {
                        best = i;
                        best_f1 = f;
                    }
                }
                Some(best)
            }
            _ => None,
        };
        Ok(TrainingExample {
            id: raw.utterance_id.clone(),
            turn,
            gold: gold.decision,
            gold_question: gold.question,
            gold_spans,
            gold_rule,
        })
    }

    /// Decision/BLEU report and span F1 of boundary pairing against the gold spans.
    pub fn evaluate(
        &self,
        examples: &[TrainingExample],
        editor: Option<&Editor>,
    ) -> Result<(EvalReport, SpanScore, Vec<Prediction>), ModelError> {
        let preds = par::map(examples, |ex| self.predict_prepared(&ex.turn, editor))
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
        let report = eval::evaluate_moves(&moves).map_err(eval_error)?;
        let extracted: Vec<_> = preds.iter().map(|p| p.extracted.clone()).collect();
        let gold: Vec<_> = examples.iter().map(|e| e.gold_spans.clone()).collect();
        Ok((report, eval::span_f1(&extracted, &gold), preds))
    }

    pub fn checkpoint(&self, step_count: u64) -> Checkpoint {
        Checkpoint::from_store(
            &self.store,
            Metadata {
                vocab_hash: self.vocab.hash(),
                hyperparameters: serde_json::to_value(self.config).expect("config serializes"),
                step_count,
            },
        )
    }

    /// Writes `model.ckpt` and `vocab.txt` into `dir`.
    pub fn save_dir(&self, dir: &Path, step_count: u64) -> Result<(), ModelError> {
        fs::create_dir_all(dir).map_err(CheckpointError::from)?;
        self.vocab.save(&dir.join(VOCAB_FILE)).map_err(CheckpointError::from)?;
        self.checkpoint(step_count).save(&dir.join(MODEL_FILE))?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self, ModelError> {
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let ckpt = Checkpoint::load(&dir.join(MODEL_FILE))?;
        Self::from_checkpoint(vocab, &ckpt)
    }

    pub fn from_checkpoint(vocab: Vocabulary, ckpt: &Checkpoint) -> Result<Self, ModelError> {
        if ckpt.metadata.vocab_hash != vocab.hash() {
            return Err(CheckpointError::VocabMismatch {
                checkpoint: ckpt.metadata.vocab_hash.clone(),
                vocabulary: vocab.hash(),
            }
            .into());
        }
        let config: ModelConfig = serde_json::from_value(ckpt.metadata.hyperparameters.clone())
            .map_err(CheckpointError::from)?;
        let mut model = RuleReader::new(vocab, config)?;
        ckpt.apply_to(&mut model.store)?;
        Ok(model)
    }
}

pub(crate) fn eval_error(e: EvalError) -> ModelError {
    ModelError::Data(e.to_string())
}

/// Saves an editor next to a model checkpoint.
pub fn save_editor(editor: &Editor, vocab: &Vocabulary, dir: &Path, step_count: u64) -> Result<(), ModelError> {
    fs::create_dir_all(dir).map_err(CheckpointError::from)?;
    let ckpt = Checkpoint::from_store(
        &editor.store,
        Metadata {
            vocab_hash: vocab.hash(),
            hyperparameters: serde_json::to_value(editor.config).expect("config serializes"),
            step_count,
        },
    );
    ckpt.save(&dir.join(EDITOR_FILE))?;
    Ok(())
}

/// Loads `editor.ckpt` from `dir` if present.
pub fn load_editor(dir: &Path, vocab: &Vocabulary) -> Result<Option<Editor>, ModelError> {
    let path = dir.join(EDITOR_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let ckpt = Checkpoint::load(&path)?;
    if ckpt.metadata.vocab_hash != vocab.hash() {
        return Err(CheckpointError::VocabMismatch {
            checkpoint: ckpt.metadata.vocab_hash.clone(),
            vocabulary: vocab.hash(),
        }
        .into());
    }
    let config = serde_json::from_value(ckpt.metadata.hyperparameters.clone()).map_err(CheckpointError::from)?;
    let mut editor = Editor::new(vocab.len(), config)?;
    ckpt.apply_to(&mut editor.store)?;
    Ok(Some(editor))
}
