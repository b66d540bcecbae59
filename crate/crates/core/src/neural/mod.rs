//! Deterministic `f64` tensor engine with a reverse-mode gradient tape,
//! the layers used by the neural stages, Adam, and JSON checkpoints.

pub mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use optim::{AdamConfig, AdamState};
pub use params::{Checkpoint, ParameterStore, ScheduleMeta, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{log_softmax_row, softmax_row, Tensor};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("non-finite gradient for parameter `{0}`")]
    NanGradient(String),
    #[error("unknown parameter `{0}`")]
    MissingParameter(String),
    #[error("parameter `{0}` registered twice")]
    DuplicateParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}
