use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure{}: {message}", .param.as_ref().map(|p| format!(" in `{p}`")).unwrap_or_default())]
    Numeric { message: String, param: Option<String> },

    #[error("parse error in {path}{}: {message}", .line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse {
        path: PathBuf,
        line: Option<usize>,
        message: String,
    },

    #[error("I/O error on {path}: {message}")]
    Io { path: PathBuf, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("metric error: {0}")]
    Metric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric {
            message: msg.into(),
            param: None,
        }
    }

    pub fn numeric_in(param: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numeric {
            message: msg.into(),
            param: Some(param.into()),
        }
    }

    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: msg.into(),
        }
    }

    /// Attach context (e.g. an epoch index) to a numeric failure.
    pub fn with_context(self, ctx: &str) -> Self {
        match self {
            Error::Numeric { message, param } => Error::Numeric {
                message: format!("{ctx}: {message}"),
                param,
            },
            other => other,
        }
    }
}
