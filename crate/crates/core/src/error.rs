use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {name}={value} (valid range {valid})")]
    Range {
        name: &'static str,
        value: usize,
        valid: String,
    },

    #[error("shape mismatch: {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, step {step}: total loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("event {index} out of bounds: ({x}, {y}) outside {width}x{height}")]
    EventOutOfBounds {
        index: usize,
        x: u32,
        y: u32,
        width: usize,
        height: usize,
    },

    #[error("events not sorted by timestamp at index {0}")]
    UnsortedEvents(usize),

    #[error("truncated record at byte offset {offset}")]
    Truncated { offset: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable short name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Range { .. } => "range",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::Diverged { .. } => "diverged",
            Error::EventOutOfBounds { .. } => "event_out_of_bounds",
            Error::UnsortedEvents(_) => "unsorted_events",
            Error::Truncated { .. } => "truncated",
            Error::Config(_) => "config",
            Error::Invalid(_) => "invalid",
            Error::Format { .. } => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
