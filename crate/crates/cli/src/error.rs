// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::ErrorKind;
use std::path::Path;

/// Failure of a subcommand, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("missing input {path}: {detail}")]
    MissingInput { path: String, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub const EXIT_MISSING: i32 = 2;
    pub const EXIT_FORMAT: i32 = 3;
    pub const EXIT_NUMERIC: i32 = 4;

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::MissingInput { .. } => Self::EXIT_MISSING,
            Self::Format(_) => Self::EXIT_FORMAT,
            Self::Numeric(_) => Self::EXIT_NUMERIC,
            Self::Other(_) => 1,
        }
    }

    pub fn read(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == ErrorKind::NotFound {
            Self::MissingInput {
                path: path.display().to_string(),
                detail: e.to_string(),
            }
        } else {
            Self::Other(format!("{}: {e}", path.display()))
        }
    }
}

impl From<moesteer::Error> for CliError {
    fn from(e: moesteer::Error) -> Self {
        match &e {
            moesteer::Error::Io { path, source } if source.kind() == ErrorKind::NotFound => Self::MissingInput {
                path: path.display().to_string(),
                detail: source.to_string(),
            },
            _ if e.is_format() => Self::Format(e.to_string()),
            _ if e.is_numeric() => Self::Numeric(e.to_string()),
            _ => Self::Other(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Other(format!("json: {e}"))
    }
}
