use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HbfError>;

#[derive(Debug, Error)]
pub enum HbfError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("non-finite matrix entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("SVD did not converge for a {rows}x{cols} matrix")]
    SvdNoConvergence { rows: usize, cols: usize },

    /// Hermitian eigendecomposition failed to converge.
    #[error("Hermitian eigendecomposition did not converge for a {dim}x{dim} matrix")]
    EigenNoConvergence { dim: usize },

    #[error("ill-conditioned Gram matrix ({context}): eigenvalues span [{min_eig:e}, {max_eig:e}]")]
    IllConditionedGram {
        context: String,
        min_eig: f64,
        max_eig: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range for {what} (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("combined noise covariance is singular at subcarrier {subcarrier}")]
    SingularNoiseCovariance { subcarrier: usize },

    #[error("beam selection failed: all {0} candidate pairs have ill-conditioned Gram matrices")]
    SelectionFailed(usize),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

impl HbfError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        HbfError::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches a context label to an ill-conditioned-Gram error; other
    /// variants pass through untouched.
    pub fn with_gram_context(self, label: impl Into<String>) -> Self {
        match self {
            HbfError::IllConditionedGram {
                min_eig, max_eig, ..
            } => HbfError::IllConditionedGram {
                context: label.into(),
                min_eig,
                max_eig,
            },
            other => other,
        }
    }
}
