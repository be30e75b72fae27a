use thiserror::Error;

use crate::tokens::PositionId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("position {position} exceeds the position budget ({max_position})")]
    PositionOverflow { position: PositionId, max_position: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid mask: {0}")]
    Mask(String),

    #[error("kv cache: {0}")]
    Cache(String),

    #[error("layout: {0}")]
    Layout(String),

    #[error("delay sequence: {0}")]
    Delays(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
