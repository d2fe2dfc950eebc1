//! Conversational machine reading: rule-span extraction, entailment scoring,
//! decision making and follow-up question editing over procedural documents.

pub mod autograd;
pub mod bertqa;
pub mod checkpoint;
pub mod decision;
pub mod editor;
pub mod encoder;
pub mod entailment;
pub mod eval;
pub mod extraction;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod params;
pub mod sharc;
pub mod synthetic;
pub mod tensor;
pub mod text;
pub mod train;

pub use autograd::{Graph, Mode, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{Real, Tensor, TensorError};
