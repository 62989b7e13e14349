use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can surface. The CLI maps variants onto process
/// exit codes through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("format error in {path} at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("environment error: {0}")]
    Env(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged in phase {phase} at step {step}: {detail}")]
    Divergence {
        phase: String,
        step: usize,
        detail: String,
    },

    #[error("interaction budget exceeded: requested {requested}, remaining {remaining}")]
    Budget { requested: usize, remaining: usize },

    #[error("phase {phase} failed: {source}")]
    Phase {
        phase: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_phase(self, phase: &str) -> Self {
        match self {
            e @ Error::Phase { .. } => e,
            e => Error::Phase {
                phase: phase.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// 0 success, 2 config, 3 data, 4 divergence, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Json(_) => 2,
            Error::Format { .. } | Error::Data(_) | Error::Csv(_) => 3,
            Error::Divergence { .. } => 4,
            Error::Phase { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
