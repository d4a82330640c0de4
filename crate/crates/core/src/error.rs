//! Crate-wide error type.

use thiserror::Error;

/// All failure modes surfaced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Input file does not match the declared schema (missing column, duplicate field, ...).
    #[error("schema error: {0}")]
    Schema(String),

    /// A data row failed to parse; carries the 1-based data row number.
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Array dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A non-finite value appeared mid-computation; names the stage.
    #[error("numeric error in {stage}: {msg}")]
    Numeric { stage: String, msg: String },

    /// Optimizer rejected an update; names the offending parameter key.
    #[error("optimizer error for parameter '{key}': {msg}")]
    Optimizer { key: String, msg: String },

    /// Forward cache does not belong to the current parameter snapshot.
    #[error("contract error: {0}")]
    Contract(String),

    /// Baseline fit could not be performed on the given data.
    #[error("fit error: {0}")]
    Fit(String),

    /// Metric undefined on the given data (single class, no valid group, ...).
    #[error("metric error: {0}")]
    Metric(String),

    /// Training diverged or was misconfigured.
    #[error("training error: {0}")]
    Train(String),

    /// Model artifact could not be read or written.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
