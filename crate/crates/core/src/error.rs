use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the toolkit.
///
/// Each variant maps onto one of the CLI exit classes through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (failing pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("geometry outside grid: {0}")]
    Geometry(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        history: Box<crate::jgnn::TrainHistory>,
    },

    #[error("no curvature peak above the stagnation point")]
    NoCurvaturePeak,

    #[error("empty trace")]
    EmptyTrace,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed artifact {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("missing artifacts: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingArtifacts(Vec<PathBuf>),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code: 2 for configuration/input problems, 3 for numerical
    /// failures, 4 for a diagnostic failure whose artifacts were still written.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_)
            | Error::DimensionMismatch(_)
            | Error::Geometry(_)
            | Error::Io { .. }
            | Error::Format { .. }
            | Error::MissingArtifacts(_) => 2,
            Error::NotPositiveDefinite { .. }
            | Error::NonFinite(_)
            | Error::Diverged { .. }
            | Error::EmptyTrace => 3,
            Error::NoCurvaturePeak => 4,
        }
    }
}
