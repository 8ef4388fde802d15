// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by the steering pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Array shapes do not fit the operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape {
        /// Operation that rejected its inputs.
        op: &'static str,
        /// Human-readable description of the offending shapes.
        detail: String,
    },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value that must be finite was not.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Adam received a gradient it cannot use.
    #[error("optimizer error on parameter `{param}`: {detail}")]
    Optimizer {
        /// Name of the parameter whose gradient was rejected.
        param: String,
        /// What went wrong.
        detail: String,
    },

    /// Mask optimization produced a non-finite loss.
    #[error("mask optimization diverged at step {step}: loss = {loss}")]
    MaskDivergence {
        /// Zero-based optimizer step.
        step: usize,
        /// Offending loss value.
        loss: f64,
    },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Training {
        /// Zero-based epoch index.
        epoch: usize,
        /// Offending loss value.
        loss: f64,
    },

    /// Token id or prompt that the model cannot accept.
    #[error("invalid input: {0}")]
    Input(String),

    /// Inconsistent fixture construction request.
    #[error("invalid circuit specification: {0}")]
    Spec(String),

    /// Hook payload does not match the model.
    #[error("injection error: {0}")]
    Injection(String),

    /// Dataset cannot be split as requested.
    #[error("split error: {0}")]
    Split(String),

    /// Malformed artifact file.
    #[error("format error at byte offset {offset}: {detail}")]
    Format {
        /// Byte offset where decoding failed.
        offset: u64,
        /// What was expected.
        detail: String,
    },

    /// A trace disagrees with the declared dataset geometry.
    #[error("trace {trace_index} is inconsistent with the dataset: {detail}")]
    Inconsistent {
        /// Index of the offending trace.
        trace_index: usize,
        /// Mismatch description.
        detail: String,
    },

    /// A dataset is empty where data is required.
    #[error("empty input: {0}")]
    Empty(String),

    /// Underlying I/O failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        /// File involved.
        path: PathBuf,
        /// OS error.
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by malformed artifact contents.
    pub fn is_format(&self) -> bool {
        matches!(
            self,
            Self::Format { .. } | Self::Inconsistent { .. } | Self::Json(_)
        )
    }

    /// True for numerical failures (divergence, non-finite values).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Self::NonFinite(_)
                | Self::Optimizer { .. }
                | Self::MaskDivergence { .. }
                | Self::Training { .. }
        )
    }
}

/// Crate result alias.
pub type Result<T> = std::result::Result<T, Error>;
