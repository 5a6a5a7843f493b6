use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FedError>;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("partition failed: class {class} exhausted (needed another sample, {available} available)")]
    Partition { class: usize, available: usize },

    #[error("local solve diverged at step {step}")]
    Divergence { step: usize },

    #[error("client {client} diverged in round {round}: {source}")]
    ClientDivergence {
        client: usize,
        round: usize,
        #[source]
        source: Box<FedError>,
    },

    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl FedError {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        FedError::Parameter(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        FedError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// True when the error signals a numerically diverged local solve.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            FedError::Divergence { .. } | FedError::ClientDivergence { .. } | FedError::NonFinite(_)
        )
    }
}
