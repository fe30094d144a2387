use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up for the requested operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    /// A caller violated an operation's calling contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration, hyperparameters or architecture.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Labels or samples that cannot be used as given.
    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate input: embedding matrix has rank {rank}, need at least 2")]
    Degenerate { rank: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
