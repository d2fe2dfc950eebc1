//! Line-delimited transcript records and deterministic replay.

use std::collections::HashMap;
use std::sync::Arc;

use rulechat_core::decision::ModelMove;
use serde::{Deserialize, Serialize};

use crate::session::{Answer, Engine, ServiceError, Sessions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TranscriptRecord {
    Create {
        session: String,
        snippet: String,
        question: String,
        scenario: String,
        #[serde(rename = "move")]
        model_move: ModelMove,
    },
    Answer {
        session: String,
        answer: Answer,
        #[serde(rename = "move")]
        model_move: ModelMove,
    },
}

impl TranscriptRecord {
    pub fn model_move(&self) -> &ModelMove {
        match self {
            TranscriptRecord::Create { model_move, .. } | TranscriptRecord::Answer { model_move, .. } => model_move,
        }
    }
}

pub fn parse_transcript(text: &str) -> Result<Vec<TranscriptRecord>, ServiceError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ReplayReport {
    pub records: usize,
    /// Indices of records whose replayed move differs from the recorded one.
    pub mismatches: Vec<usize>,
}

impl ReplayReport {
    pub fn reproduced(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Re-runs every create and answer against `engine` and compares the moves.
pub fn replay(engine: Arc<Engine>, records: &[TranscriptRecord]) -> Result<ReplayReport, ServiceError> {
    let sessions = Sessions::new(engine);
    let mut ids: HashMap<&str, String> = HashMap::new();
    let mut report = ReplayReport {
        records: records.len(),
        ..ReplayReport::default()
    };
    for (i, rec) in records.iter().enumerate() {
        let got = match rec {
            TranscriptRecord::Create {
                session,
                snippet,
                question,
                scenario,
                ..
            } => {
                let s = sessions.create(snippet, question, scenario)?;
                ids.insert(session, s.id.clone());
                s.last_move
            }
            TranscriptRecord::Answer { session, answer, .. } => {
                let id = ids
                    .get(session.as_str())
                    .ok_or_else(|| ServiceError::NotFound(session.clone()))?;
                sessions.answer(id, *answer)?.last_move
            }
        };
        if &got != rec.model_move() {
            report.mismatches.push(i);
        }
    }
    Ok(report)
}
