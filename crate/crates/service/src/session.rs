use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex, RwLock};

use rulechat_core::decision::{Decision, ModelMove};
use rulechat_core::editor::Editor;
use rulechat_core::model::{load_editor, ExplainedRule, RuleReader};
use rulechat_core::nn::ModelError;
use rulechat_core::text::{DialogueState, Turn};
use rulechat_core::Real;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transcript::TranscriptRecord;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("no session {0}")]
    NotFound(String),
    #[error("session {0} has concluded")]
    Concluded(String),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("transcript: {0}")]
    Io(#[from] std::io::Error),
    #[error("transcript record: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    AwaitingUser,
    Concluded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    /// History form, as in the dataset.
    pub fn label(self) -> &'static str {
        match self {
            Answer::Yes => "Yes",
            Answer::No => "No",
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Answer {
    type Err = ServiceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "yes" | "y" => Ok(Answer::Yes),
            "no" | "n" => Ok(Answer::No),
            other => Err(ServiceError::BadRequest(format!("answer must be yes or no, got {other:?}"))),
        }
    }
}

/// Per-span scores of the last turn, with character offsets into the snippet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explain {
    pub decision: Decision,
    /// Class scores ordered yes, no, irrelevant, inquire.
    pub z: [Real; 4],
    pub spans: Vec<ExplainedRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub state: DialogueState,
    pub last_move: ModelMove,
    pub explain: Explain,
    pub status: Status,
}

/// A frozen reader and optional editor shared by all sessions.
#[derive(Debug)]
pub struct Engine {
    pub reader: RuleReader,
    pub editor: Option<Editor>,
}

impl Engine {
    pub fn new(reader: RuleReader, editor: Option<Editor>) -> Self {
        Engine { reader, editor }
    }

    /// Loads a checkpoint directory; the editor is used when present and `use_editor` is set.
    pub fn load(dir: &Path, use_editor: bool) -> Result<Self, ModelError> {
        let reader = RuleReader::load_dir(dir)?;
        let editor = if use_editor {
            load_editor(dir, &reader.vocab)?
        } else {
            None
        };
        Ok(Engine { reader, editor })
    }

    /// One full model turn on `state`.
    pub fn turn(&self, state: &DialogueState) -> Result<(ModelMove, Explain), ModelError> {
        let p = self.reader.predict(state, self.editor.as_ref())?;
        let explain = Explain {
            decision: p.model_move.decision,
            z: p.z,
            spans: p.rules,
        };
        Ok((p.model_move, explain))
    }

    fn session(&self, id: String, state: DialogueState) -> Result<Session, ModelError> {
        let (last_move, explain) = self.turn(&state)?;
        let status = if last_move.decision == Decision::Inquire {
            Status::AwaitingUser
        } else {
            Status::Concluded
        };
        Ok(Session {
            id,
            state,
            last_move,
            explain,
            status,
        })
    }
}

type Log = Mutex<Box<dyn Write + Send>>;

/// In-memory sessions. Each session is locked for the duration of its own turn.
pub struct Sessions {
    engine: Arc<Engine>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    log: Option<Log>,
}

impl Sessions {
    pub fn new(engine: Arc<Engine>) -> Self {
        Sessions {
            engine,
            sessions: RwLock::new(HashMap::new()),
            log: None,
        }
    }

    /// Appends one JSON record per create and answer to `log`.
    pub fn with_log(mut self, log: Box<dyn Write + Send>) -> Self {
        self.log = Some(Mutex::new(log));
        self
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    fn record(&self, rec: &TranscriptRecord) -> Result<(), ServiceError> {
        if let Some(log) = &self.log {
            let mut w = log.lock().expect("transcript lock");
            serde_json::to_writer(&mut *w, rec)?;
            writeln!(w)?;
            w.flush()?;
        }
        Ok(())
    }

    pub fn create(&self, snippet: &str, question: &str, scenario: &str) -> Result<Session, ServiceError> {
        if snippet.trim().is_empty() {
            return Err(ServiceError::BadRequest("snippet must not be empty".into()));
        }
        let state = DialogueState {
            snippet: snippet.to_string(),
            question: question.to_string(),
            scenario: scenario.to_string(),
            history: Vec::new(),
        };
        let id = uuid::Uuid::new_v4().simple().to_string();
        let session = self.engine.session(id.clone(), state)?;
        self.record(&TranscriptRecord::Create {
            session: id.clone(),
            snippet: snippet.to_string(),
            question: question.to_string(),
            scenario: scenario.to_string(),
            model_move: session.last_move.clone(),
        })?;
        self.sessions
            .write()
            .expect("session map lock")
            .insert(id, Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    fn handle(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServiceError> {
        self.sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    pub fn get(&self, id: &str) -> Result<Session, ServiceError> {
        Ok(self.handle(id)?.lock().expect("session lock").clone())
    }

    pub fn explain(&self, id: &str) -> Result<Explain, ServiceError> {
        Ok(self.handle(id)?.lock().expect("session lock").explain.clone())
    }

    /// Appends (last inquiry, answer) to the history and runs the next turn.
    pub fn answer(&self, id: &str, answer: Answer) -> Result<Session, ServiceError> {
        let handle = self.handle(id)?;
        let mut session = handle.lock().expect("session lock");
        if session.status == Status::Concluded {
            return Err(ServiceError::Concluded(id.to_string()));
        }
        let inquiry = session.last_move.question.clone().unwrap_or_default();
        let mut state = session.state.clone();
        state.history.push(Turn {
            inquiry,
            answer: answer.label().to_string(),
        });
        let next = self.engine.session(id.to_string(), state)?;
        self.record(&TranscriptRecord::Answer {
            session: id.to_string(),
            answer,
            model_move: next.last_move.clone(),
        })?;
        *session = next;
        Ok(session.clone())
    }

    pub fn len(&self) -> usize {
        self.sessions.read().expect("session map lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
