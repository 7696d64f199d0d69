use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can surface.
///
/// Variants map one-to-one onto the CLI exit codes (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {path} at byte offset {offset}: {reason}")]
    Format {
        path: String,
        offset: u64,
        reason: String,
    },

    #[error("training diverged: net {net} at iteration {iteration}: {reason}")]
    Diverged {
        net: usize,
        iteration: u64,
        reason: String,
    },

    #[error("gradient check failed for {op}: max relative error {max_rel_err:e} exceeds {tolerance:e}")]
    Gradcheck {
        op: String,
        max_rel_err: f64,
        tolerance: f64,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            offset,
            reason: reason.into(),
        }
    }

    /// Process exit code: 2 config, 3 data format, 4 divergence, 5 gradcheck, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Format { .. } => 3,
            Error::Diverged { .. } => 4,
            Error::Gradcheck { .. } => 5,
            Error::Dimension { .. } | Error::Io { .. } => 1,
        }
    }
}
