// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by container I/O, probe fitting and the CLI.
#[derive(Debug, Error)]
pub enum ProbeError {
    /// A file does not follow the container or matrix layout.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Structural disagreement between parts of a dataset (row counts, spans, one-hot sums).
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Payload values that cannot be used (NaN, Inf, constant targets).
    #[error("data error: {0}")]
    Data(String),

    /// Invalid user configuration or arguments.
    #[error("config error: {0}")]
    Config(String),

    /// The design matrix is rank deficient for an unregularized solve.
    #[error("singular design: {0}")]
    Singular(String),

    /// A decomposition failed to converge or produced unusable values.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ProbeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ProbeError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        ProbeError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            ProbeError::Config(_) => 2,
            ProbeError::Format { .. } | ProbeError::Consistency(_) | ProbeError::Data(_) | ProbeError::Io { .. } => 3,
            ProbeError::Singular(_) | ProbeError::Numerical(_) => 4,
        }
    }
}

pub type Result<T, E = ProbeError> = std::result::Result<T, E>;
