//! ShARC-format ingestion, dialogue-tree reconstruction and noisy rule-span supervision.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::decision::Decision;
use crate::par;
use crate::text::{self, join_tokens, DialogueState, TokenSequence, Turn};

const STOP_WORDS: &str = include_str!("../resources/stopwords.txt");

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("dataset is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("dataset must be a JSON array of records")]
    NotAnArray,
    #[error("record {index}: missing or invalid field `{field}`")]
    Field { index: usize, field: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub follow_up_question: String,
    pub follow_up_answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub utterance_id: String,
    pub tree_id: String,
    pub snippet: String,
    pub question: String,
    pub scenario: String,
    pub history: Vec<HistoryEntry>,
    pub answer: String,
}

/// The supervised move for one example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldMove {
    pub decision: Decision,
    /// The follow-up question when the decision is inquire.
    pub question: Option<String>,
}

impl RawExample {
    pub fn gold(&self) -> GoldMove {
        match Decision::from_label(self.answer.trim()) {
            Some(decision) => GoldMove {
                decision,
                question: None,
            },
            None => GoldMove {
                decision: Decision::Inquire,
                question: Some(self.answer.clone()),
            },
        }
    }

    pub fn dialogue_state(&self) -> DialogueState {
        DialogueState {
            snippet: self.snippet.clone(),
            question: self.question.clone(),
            scenario: self.scenario.clone(),
            history: self
                .history
                .iter()
                .map(|h| Turn {
                    inquiry: h.follow_up_question.clone(),
                    answer: h.follow_up_answer.clone(),
                })
                .collect(),
        }
    }
}

fn str_field(record: &Value, index: usize, field: &str) -> Result<String, IngestError> {
    record
        .get(field)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| IngestError::Field {
            index,
            field: field.to_string(),
        })
}

fn parse_record(record: &Value, index: usize) -> Result<RawExample, IngestError> {
    let history = match record.get("history") {
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(k, h)| {
                let q = h.get("follow_up_question").and_then(Value::as_str);
                let a = h.get("follow_up_answer").and_then(Value::as_str);
                match (q, a) {
                    (Some(q), Some(a)) => Ok(HistoryEntry {
                        follow_up_question: q.to_string(),
                        follow_up_answer: a.to_string(),
                    }),
                    _ => Err(IngestError::Field {
                        index,
                        field: format!("history[{k}]"),
                    }),
                }
            })
            .collect::<Result<Vec<_>, _>>()?,
        _ => {
            return Err(IngestError::Field {
                index,
                field: "history".into(),
            })
        }
    };
    let tree_id = str_field(record, index, "tree_id")?;
    if tree_id.is_empty() {
        return Err(IngestError::Field {
            index,
            field: "tree_id".into(),
        });
    }
    Ok(RawExample {
        utterance_id: str_field(record, index, "utterance_id")?,
        tree_id,
        snippet: str_field(record, index, "snippet")?,
        question: str_field(record, index, "question")?,
        scenario: str_field(record, index, "scenario")?,
        history,
        answer: str_field(record, index, "answer")?,
    })
}

pub fn parse_dataset_str(json: &str) -> Result<Vec<RawExample>, IngestError> {
    let value: Value = serde_json::from_str(json)?;
    let records = value.as_array().ok_or(IngestError::NotAnArray)?;
    let examples = records
        .iter()
        .enumerate()
        .map(|(i, r)| parse_record(r, i))
        .collect::<Result<Vec<_>, _>>()?;
    for id in duplicate_ids(&examples) {
        log::warn!("duplicate utterance_id {id}; keeping every copy");
    }
    Ok(examples)
}

/// Reads a ShARC-style JSON array. Unknown fields are ignored.
pub fn parse_dataset(path: &Path) -> Result<Vec<RawExample>, IngestError> {
    let json = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset_str(&json)
}

/// Every text field of the records, in record order.
pub fn corpus_texts(examples: &[RawExample]) -> impl Iterator<Item = &str> {
    examples.iter().flat_map(|e| {
        [e.snippet.as_str(), e.question.as_str(), e.scenario.as_str(), e.answer.as_str()]
            .into_iter()
            .chain(
                e.history
                    .iter()
                    .flat_map(|h| [h.follow_up_question.as_str(), h.follow_up_answer.as_str()]),
            )
    })
}

/// Utterance ids that occur more than once, in first-appearance order.
pub fn duplicate_ids(examples: &[RawExample]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut reported = HashSet::new();
    let mut dups = Vec::new();
    for e in examples {
        if !seen.insert(e.utterance_id.as_str()) && reported.insert(e.utterance_id.as_str()) {
            dups.push(e.utterance_id.clone());
        }
    }
    dups
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTree {
    pub tree_id: String,
    pub snippet: String,
    pub question: String,
    /// Every follow-up question seen in the tree, first appearance first.
    pub questions: Vec<String>,
}

pub fn reconstruct_trees(examples: &[RawExample]) -> Vec<DialogueTree> {
    let mut trees: Vec<DialogueTree> = Vec::new();
    let mut by_id: HashMap<&str, usize> = HashMap::new();
    for e in examples {
        let idx = *by_id.entry(e.tree_id.as_str()).or_insert_with(|| {
            trees.push(DialogueTree {
                tree_id: e.tree_id.clone(),
                snippet: e.snippet.clone(),
                question: e.question.clone(),
                questions: Vec::new(),
            });
            trees.len() - 1
        });
        let tree = &mut trees[idx];
        let asked = e.history.iter().map(|h| h.follow_up_question.clone());
        let answered = e.gold().question;
        for q in asked.chain(answered) {
            if !tree.questions.contains(&q) {
                tree.questions.push(q);
            }
        }
    }
    trees
}

pub fn is_stop_word(token: &str) -> bool {
    STOP_WORDS.lines().any(|w| w == token)
}

/// Drops punctuation and stop words from a tokenized clause.
pub fn trim_clause(tokens: &[String]) -> Vec<String> {
    tokens
        .iter()
        .filter(|t| !text::is_punctuation_token(t) && !is_stop_word(t))
        .cloned()
        .collect()
}

/// A token interval (inclusive) and its character edit distance to the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpanMatch {
    pub start: usize,
    pub end: usize,
    pub distance: usize,
}

/// Shortest best-matching span of `snippet` for `clause`.
///
/// Minimizes the character-level Levenshtein distance between the space-joined
/// span and the space-joined clause; ties go to fewer tokens, then the earlier start.
/// Returns `None` for an empty clause or snippet.
pub fn match_span<S: AsRef<str>>(snippet: &[S], clause: &[S]) -> Option<SpanMatch> {
    if snippet.is_empty() || clause.is_empty() {
        return None;
    }
    let target: Vec<char> = join_tokens(clause).chars().collect();
    let m = target.len();
    let token_chars: Vec<Vec<char>> = snippet.iter().map(|t| t.as_ref().chars().collect()).collect();
    let mut best: Option<SpanMatch> = None;
    let mut row: Vec<usize> = vec![0; m + 1];
    let mut next: Vec<usize> = vec![0; m + 1];
    for start in 0..snippet.len() {
        // row[j] = distance between the span text so far and target[..j]
        for (j, r) in row.iter_mut().enumerate() {
            *r = j;
        }
        let mut consumed = 0usize;
        #[allow(clippy::needless_range_loop)]
        for end in start..snippet.len() {
            let sep = if end > start { Some(' ') } else { None };
            for c in sep.into_iter().chain(token_chars[end].iter().copied()) {
                consumed += 1;
                next[0] = consumed;
                for j in 1..=m {
                    let sub = row[j - 1] + usize::from(target[j - 1] != c);
                    next[j] = sub.min(row[j] + 1).min(next[j - 1] + 1);
                }
                std::mem::swap(&mut row, &mut next);
            }
            let cand = SpanMatch {
                start,
                end,
                distance: row[m],
            };
            let better = match best {
                None => true,
                Some(b) => {
                    (cand.distance, cand.end - cand.start, cand.start)
                        < (b.distance, b.end - b.start, b.start)
                }
            };
            if better {
                best = Some(cand);
            }
            // Every further extension adds at least `consumed - m` unmatched characters.
            if let Some(b) = best {
                if consumed > m && consumed - m > b.distance {
                    break;
                }
            }
        }
    }
    best
}

/// Token spans of `*`-bullets: text after a `*` up to the next `*` or newline, trimmed.
pub fn bullet_spans(snippet: &str, doc: &TokenSequence) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    for (i, c) in snippet.char_indices() {
        if c != '*' {
            continue;
        }
        let rest = &snippet[i + 1..];
        let stop = rest.find(['*', '\n']).unwrap_or(rest.len());
        let raw = &rest[..stop];
        let lead = raw.len() - raw.trim_start().len();
        let lo = i + 1 + lead;
        let hi = i + 1 + raw.trim_end().len();
        if lo >= hi {
            continue;
        }
        let inside: Vec<usize> = doc
            .char_offsets
            .iter()
            .enumerate()
            .filter(|(_, &(s, e))| s >= lo && e <= hi)
            .map(|(k, _)| k)
            .collect();
        if let (Some(&first), Some(&last)) = (inside.first(), inside.last()) {
            spans.push((first, last));
        }
    }
    spans
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanSource {
    MatchedClause,
    Bullet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisedSpan {
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub source: SpanSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisedSpanSet {
    pub tree_id: String,
    pub spans: Vec<SupervisedSpan>,
}

/// Removes spans fully covered by a longer span (and exact duplicates, keeping the first).
/// Output is ordered by (start, end).
pub fn dedup_spans<T: Clone>(spans: &[T], bounds: impl Fn(&T) -> (usize, usize)) -> Vec<T> {
    let mut kept: Vec<T> = Vec::new();
    for (i, s) in spans.iter().enumerate() {
        let (a, b) = bounds(s);
        let covered = spans.iter().enumerate().any(|(j, o)| {
            let (c, d) = bounds(o);
            let contains = c <= a && b <= d;
            contains && ((d - c) > (b - a) || (j < i && (c, d) == (a, b)))
        });
        if !covered {
            kept.push(s.clone());
        }
    }
    kept.sort_by_key(|s| bounds(s));
    kept
}

pub fn build_supervision(tree: &DialogueTree) -> SupervisedSpanSet {
    let doc = text::tokenize(&tree.snippet);
    let surface = |s: usize, e: usize| {
        let (lo, hi) = doc.span_offsets(s, e);
        tree.snippet[lo..hi].to_string()
    };
    let mut spans = Vec::new();
    for q in &tree.questions {
        let clause = trim_clause(&text::tokenize(q).tokens);
        if let Some(m) = match_span(&doc.tokens, &clause) {
            spans.push(SupervisedSpan {
                start: m.start,
                end: m.end,
                text: surface(m.start, m.end),
                source: SpanSource::MatchedClause,
            });
        }
    }
    for (s, e) in bullet_spans(&tree.snippet, &doc) {
        spans.push(SupervisedSpan {
            start: s,
            end: e,
            text: surface(s, e),
            source: SpanSource::Bullet,
        });
    }
    SupervisedSpanSet {
        tree_id: tree.tree_id.clone(),
        spans: dedup_spans(&spans, |s| (s.start, s.end)),
    }
}

/// Supervision for every tree, keyed (and therefore ordered) by tree id.
pub fn build_all_supervision(trees: &[DialogueTree]) -> BTreeMap<String, Vec<SupervisedSpan>> {
    par::map(trees, build_supervision)
        .into_iter()
        .map(|s| (s.tree_id, s.spans))
        .collect()
}
