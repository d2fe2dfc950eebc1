//! Tokenization, vocabulary and model-input assembly.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

pub const QUESTION_SEGMENT: usize = 0;
pub const DOCUMENT_SEGMENT: usize = 1;
pub const SCENARIO_SEGMENT: usize = 2;
pub const FIRST_HISTORY_SEGMENT: usize = 3;
/// Highest segment id given to history turns; later turns share it.
pub const MAX_HISTORY_SEGMENT: usize = 14;
/// Segment id of the appended decision-label blocks in the extractive baseline.
pub const LABEL_SEGMENT: usize = 15;
pub const NUM_SEGMENTS: usize = 16;

pub const DEFAULT_MAX_LEN: usize = 512;

#[derive(Debug, Error, PartialEq)]
pub enum TextError {
    #[error("the rule text is empty")]
    EmptyDocument,
    #[error("maximum length {0} cannot hold the sentinels and one document token")]
    MaxLenTooSmall(usize),
    #[error("vocabulary file: {0}")]
    VocabFile(String),
}

/// Tokens of one source string, with byte offsets back into it.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub char_offsets: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Byte range in the source covering tokens `start..=end`.
    pub fn span_offsets(&self, start: usize, end: usize) -> (usize, usize) {
        (self.char_offsets[start].0, self.char_offsets[end].1)
    }
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercased word-level tokenization: whitespace separates words, and every
/// punctuation character is a token of its own.
pub fn tokenize(text: &str) -> TokenSequence {
    let mut seq = TokenSequence::default();
    let mut word_start: Option<usize> = None;
    let flush = |seq: &mut TokenSequence, start: usize, end: usize| {
        seq.tokens.push(text[start..end].to_lowercase());
        seq.char_offsets.push((start, end));
    };
    for (i, c) in text.char_indices() {
        if c.is_whitespace() || is_punct(c) {
            if let Some(s) = word_start.take() {
                flush(&mut seq, s, i);
            }
            if is_punct(c) {
                flush(&mut seq, i, i + c.len_utf8());
            }
        } else if word_start.is_none() {
            word_start = Some(i);
        }
    }
    if let Some(s) = word_start {
        flush(&mut seq, s, text.len());
    }
    seq
}

pub fn is_punctuation_token(token: &str) -> bool {
    let mut chars = token.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if is_punct(c))
}

/// Space-joined tokens.
pub fn join_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

/// Space-joined tokens with closing punctuation attached to the preceding word.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for t in tokens.iter().map(AsRef::as_ref) {
        let attach = matches!(t, "?" | "." | "," | "!" | ";" | ":" | ")" | "'" | "%");
        if !out.is_empty() && !attach && !out.ends_with(['(', '\'']) {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::new())
    }
}

impl Vocabulary {
    /// Reserved tokens followed by `tokens` (duplicates and reserved names skipped).
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED.iter().map(|s| s.to_string()).chain(tokens) {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    /// Every token seen in `texts` (min frequency 1), ordered by descending frequency then lexically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for t in tokenize(text).tokens {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(entries.into_iter().map(|(t, _)| t).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// File form: one token per line, line number = id.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_file_string(content: &str) -> Result<Self, TextError> {
        let tokens: Vec<String> = content.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(TextError::VocabFile(
                "reserved tokens must occupy the first lines".into(),
            ));
        }
        let v = Self::from_tokens(tokens[RESERVED.len()..].to_vec());
        if v.len() != tokens.len() {
            return Err(TextError::VocabFile("duplicate tokens".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_file_string())
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let content = fs::read_to_string(path).map_err(|e| TextError::VocabFile(e.to_string()))?;
        Self::from_file_string(&content)
    }

    /// SHA-256 of the file form, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub inquiry: String,
    pub answer: String,
}

/// Everything the model sees for one turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueState {
    pub snippet: String,
    pub question: String,
    pub scenario: String,
    pub history: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledInput {
    pub tokens: Vec<String>,
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    /// Positions of the (possibly truncated) document tokens.
    pub document_range: Range<usize>,
    /// Number of most recent history turns that survived truncation.
    pub history_kept: usize,
}

impl AssembledInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub(crate) fn push(&mut self, token: &str, id: usize, segment: usize) {
        self.position_ids.push(self.token_ids.len());
        self.tokens.push(token.to_string());
        self.token_ids.push(id);
        self.segment_ids.push(segment);
    }

    pub(crate) fn push_sep(&mut self, segment: usize) {
        self.push(RESERVED[SEP], SEP, segment);
    }
}

/// Tokenized parts of a [`DialogueState`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedState {
    pub question: TokenSequence,
    pub document: TokenSequence,
    pub scenario: TokenSequence,
    /// (inquiry, answer) per turn, oldest first.
    pub history: Vec<(TokenSequence, TokenSequence)>,
}

impl TokenizedState {
    pub fn new(state: &DialogueState) -> Self {
        TokenizedState {
            question: tokenize(&state.question),
            document: tokenize(&state.snippet),
            scenario: tokenize(&state.scenario),
            history: state
                .history
                .iter()
                .map(|t| (tokenize(&t.inquiry), tokenize(&t.answer)))
                .collect(),
        }
    }

    pub fn inquiries(&self) -> Vec<&TokenSequence> {
        self.history.iter().map(|(q, _)| q).collect()
    }
}

/// Lays out `[CLS] question [SEP] document [SEP] scenario [SEP] (inquiry answer [SEP])*`.
///
/// When over `max_len`, tokens are removed in this order until the input fits:
/// whole history turns oldest-first, scenario tail, document tail (never below one
/// token), question tail.
pub fn assemble_input(
    state: &TokenizedState,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<AssembledInput, TextError> {
    if state.document.is_empty() {
        return Err(TextError::EmptyDocument);
    }
    let mut q = state.question.len();
    let mut d = state.document.len();
    let mut s = state.scenario.len();
    let turn_len = |(a, b): &(TokenSequence, TokenSequence)| a.len() + b.len() + 1;
    let mut first_turn = 0;
    let mut total =
        4 + q + d + s + state.history.iter().map(turn_len).sum::<usize>();
    while total > max_len {
        if first_turn < state.history.len() {
            total -= turn_len(&state.history[first_turn]);
            first_turn += 1;
        } else if s > 0 {
            s -= 1;
            total -= 1;
        } else if d > 1 {
            d -= 1;
            total -= 1;
        } else if q > 0 {
            q -= 1;
            total -= 1;
        } else {
            return Err(TextError::MaxLenTooSmall(max_len));
        }
    }

    let mut out = AssembledInput {
        tokens: Vec::with_capacity(total),
        token_ids: Vec::with_capacity(total),
        segment_ids: Vec::with_capacity(total),
        position_ids: Vec::with_capacity(total),
        document_range: 0..0,
        history_kept: state.history.len() - first_turn,
    };
    out.push(RESERVED[CLS], CLS, QUESTION_SEGMENT);
    for t in &state.question.tokens[..q] {
        out.push(t, vocab.id(t), QUESTION_SEGMENT);
    }
    out.push_sep(QUESTION_SEGMENT);
    let doc_start = out.len();
    for t in &state.document.tokens[..d] {
        out.push(t, vocab.id(t), DOCUMENT_SEGMENT);
    }
    out.document_range = doc_start..out.len();
    out.push_sep(DOCUMENT_SEGMENT);
    for t in &state.scenario.tokens[..s] {
        out.push(t, vocab.id(t), SCENARIO_SEGMENT);
    }
    out.push_sep(SCENARIO_SEGMENT);
    for (i, (inq, ans)) in state.history.iter().enumerate().skip(first_turn) {
        let seg = (FIRST_HISTORY_SEGMENT + i).min(MAX_HISTORY_SEGMENT);
        for t in inq.tokens.iter().chain(&ans.tokens) {
            out.push(t, vocab.id(t), seg);
        }
        out.push_sep(seg);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s).tokens
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(toks("Are you a UK resident?"), ["are", "you", "a", "uk", "resident", "?"]);
        assert!(toks("").is_empty());
        assert_eq!(toks("UK-based."), ["uk", "-", "based", "."]);
        assert_eq!(toks("  you're\n* savings"), ["you", "'", "re", "*", "savings"]);
    }

    #[test]
    fn offsets_reproduce_surface() {
        let text = "Ünïcode résumé, “quoted” text";
        let seq = tokenize(text);
        for (t, &(s, e)) in seq.tokens.iter().zip(&seq.char_offsets) {
            assert_eq!(&text[s..e].to_lowercase(), t);
        }
    }

    #[test]
    fn detokenize_attaches_punctuation() {
        assert_eq!(detokenize(&["are", "you", "ok", "?"]), "are you ok?");
        assert_eq!(join_tokens(&["are", "you", "?"]), "are you ?");
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let v = Vocabulary::build(["b a a", "c"]);
        assert_eq!(v.token(0), "[PAD]");
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("zzz"), UNK);
        let back = Vocabulary::from_file_string(&v.to_file_string()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        assert!(Vocabulary::from_file_string("a\nb\n").is_err());
    }

    fn state(history: Vec<Turn>) -> DialogueState {
        DialogueState {
            snippet: "You must be a UK resident.".into(),
            question: "Can I apply?".into(),
            scenario: String::new(),
            history,
        }
    }

    #[test]
    fn layout_without_scenario_or_history() {
        let st = state(vec![]);
        let vocab = Vocabulary::build([st.snippet.as_str(), st.question.as_str()]);
        let a = assemble_input(&TokenizedState::new(&st), &vocab, DEFAULT_MAX_LEN).unwrap();
        let expected: Vec<&str> = [
            "[CLS]", "can", "i", "apply", "?", "[SEP]", "you", "must", "be", "a", "uk", "resident",
            ".", "[SEP]", "[SEP]",
        ]
        .to_vec();
        assert_eq!(a.tokens, expected);
        assert_eq!(a.document_range, 6..13);
        assert_eq!(a.position_ids, (0..15).collect::<Vec<_>>());
        assert_eq!(a.segment_ids[14], SCENARIO_SEGMENT);
    }

    #[test]
    fn history_turn_gets_its_own_segment() {
        let st = state(vec![Turn {
            inquiry: "Are you a UK resident?".into(),
            answer: "Yes".into(),
        }]);
        let vocab = Vocabulary::default();
        let a = assemble_input(&TokenizedState::new(&st), &vocab, DEFAULT_MAX_LEN).unwrap();
        let block: Vec<usize> = a.segment_ids[15..].to_vec();
        assert_eq!(block, vec![FIRST_HISTORY_SEGMENT; 8]);
        assert_eq!(a.tokens.last().unwrap(), "[SEP]");
        assert_eq!(a.tokens[a.len() - 2], "yes");
    }

    #[test]
    fn empty_document_rejected() {
        let mut st = state(vec![]);
        st.snippet = "   ".into();
        assert_eq!(
            assemble_input(&TokenizedState::new(&st), &Vocabulary::default(), 512),
            Err(TextError::EmptyDocument)
        );
    }

    #[test]
    fn truncation_order() {
        let st = DialogueState {
            snippet: "a b c d e f".into(),
            question: "q1 q2".into(),
            scenario: "s1 s2".into(),
            history: vec![
                Turn { inquiry: "old".into(), answer: "yes".into() },
                Turn { inquiry: "new".into(), answer: "no".into() },
            ],
        };
        let ts = TokenizedState::new(&st);
        let v = Vocabulary::default();
        // full length = 4 + 2 + 6 + 2 + 3 + 3 = 20
        assert_eq!(assemble_input(&ts, &v, 20).unwrap().len(), 20);
        let a = assemble_input(&ts, &v, 17).unwrap();
        assert_eq!(a.history_kept, 1);
        let a = assemble_input(&ts, &v, 12).unwrap();
        assert_eq!(a.history_kept, 0);
        assert_eq!(a.document_range.len(), 6);
        assert!(!a.tokens.contains(&"s2".to_string()));
        let a = assemble_input(&ts, &v, 8).unwrap();
        assert_eq!(a.document_range.len(), 2);
        assert!(a.tokens.contains(&"q2".to_string()));
        let a = assemble_input(&ts, &v, 5).unwrap();
        assert_eq!(a.document_range.len(), 1);
        assert_eq!(a.tokens.iter().filter(|t| t.starts_with('q')).count(), 0);
        assert_eq!(assemble_input(&ts, &v, 4), Err(TextError::MaxLenTooSmall(4)));
    }
}
