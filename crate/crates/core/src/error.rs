use std::io;

use thiserror::Error;

pub type Result<T, E = SpiralError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SpiralError {
    /// A configuration value or tensor shape violates a documented constraint.
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value appeared while evaluating an encoder layer.
    #[error("non-finite value in encoder layer {}", layer.map_or_else(|| "?".to_string(), |l| l.to_string()))]
    NonFinite { layer: Option<usize> },

    #[error("state error: {0}")]
    State(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("stream error: {0}")]
    Stream(String),

    /// The target cannot be aligned to the given number of frames; the loss is infinite.
    #[error("target of length {target_len} needs at least {required} frames, got {frames}")]
    Unalignable {
        target_len: usize,
        required: usize,
        frames: usize,
    },

    /// Decoded and reference word counts differ, so per-word delays are undefined.
    #[error("emitted {emitted} words but the reference has {reference}")]
    WordMismatch { emitted: usize, reference: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SpiralError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        SpiralError::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        SpiralError::Format(msg.into())
    }
}
