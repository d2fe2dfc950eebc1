//! Interactive dialogue sessions over a trained rule reader.
//!
//! A session holds the dialogue state and the model's last move. Creating a session
//! and answering a follow-up question each run one full model turn.

pub mod http;
pub mod session;
pub mod transcript;

pub use session::{Answer, Engine, Explain, ServiceError, Session, Sessions, Status};
pub use transcript::{parse_transcript, replay, ReplayReport, TranscriptRecord};
