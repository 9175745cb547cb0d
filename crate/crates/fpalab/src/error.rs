//! Crate-wide error type and the exit-code contract used by the CLI.

use std::path::PathBuf;

/// Errors surfaced by the tensor engine, model zoo, attacks, and harness.
///
/// The CLI maps these onto process exit codes: configuration problems exit
/// with 2, violated runtime invariants exit with 3, and everything else
/// (I/O, malformed input files, diverged training) exits with 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes fed to an operation. `detail` names the
    /// offending axes and their extents.
    #[error("dimension mismatch in `{op}`: {detail}")]
    Dim { op: &'static str, detail: String },

    /// Invalid configuration value (file or CLI), detected before any work runs.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed bytes in an on-disk artifact (dataset file, checkpoint).
    #[error("format error in {path} at byte {offset}: {detail}")]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    /// Misuse of the autodiff tape, e.g. running backward twice or asking a
    /// non-scalar node for a backward sweep.
    #[error("tape error: {0}")]
    Tape(String),

    /// Training produced a non-finite loss; the model was rolled back to the
    /// last finite epoch boundary before this was raised.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },

    /// A runtime invariant that must hold by construction (perturbation
    /// budget, permutation bijectivity, ...) was observed broken.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// I/O failure with the path that was being touched.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dim {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Invariant(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
