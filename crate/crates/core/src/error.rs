use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
///
/// Each variant maps onto a machine-readable tag (see [`Error::tag`]) and a
/// process exit code (see [`Error::exit_code`]) used by the command line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("truncated payload in {path}: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("parse error in field `{field}`: {message}")]
    Parse { field: &'static str, message: String },

    #[error("unsupported format: {0}")]
    Unsupported(String),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("validation failed [{tag}]: {message}")]
    Validation { tag: String, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("AUC undefined: {n_pos} positive and {n_neg} negative samples{}", context.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    UndefinedAuc {
        n_pos: usize,
        n_neg: usize,
        context: Option<String>,
    },

    #[error("numerical failure [{tag}]: {message}")]
    Numerical { tag: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(field: &'static str, message: impl Into<String>) -> Self {
        Error::Parse {
            field,
            message: message.into(),
        }
    }

    pub fn validation(tag: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            tag: tag.into(),
            message: message.into(),
        }
    }

    pub(crate) fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }

    pub(crate) fn numerical(tag: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numerical {
            tag: tag.into(),
            message: message.into(),
        }
    }

    /// Dotted machine-readable tag, e.g. `config.calibration.percentiles`.
    pub fn tag(&self) -> String {
        match self {
            Error::Io { .. } => "data.io".into(),
            Error::Truncated { .. } => "data.truncated".into(),
            Error::Parse { field, .. } => format!("data.parse.{field}"),
            Error::Unsupported(_) => "data.unsupported".into(),
            Error::Corrupt(_) => "data.corrupt".into(),
            Error::Validation { tag, .. } => tag.clone(),
            Error::Contract(_) => "contract".into(),
            Error::UndefinedAuc { .. } => "numerical.auc.undefined".into(),
            Error::Numerical { tag, .. } => tag.clone(),
        }
    }

    /// 2 for configuration/validation problems, 3 for bad or missing data,
    /// 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation { .. } | Error::Contract(_) => 2,
            Error::Io { .. }
            | Error::Truncated { .. }
            | Error::Parse { .. }
            | Error::Unsupported(_)
            | Error::Corrupt(_) => 3,
            Error::UndefinedAuc { .. } | Error::Numerical { .. } => 4,
        }
    }
}
