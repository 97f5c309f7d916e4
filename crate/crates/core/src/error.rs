use std::path::PathBuf;

use crate::schema::{Likelihood, ValidationReport};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: relation {relation} index ({row}, {col}) out of bounds for {n_rows}x{n_cols} matrix")]
    IndexOutOfBounds {
        line: usize,
        relation: usize,
        row: usize,
        col: usize,
        n_rows: usize,
        n_cols: usize,
    },

    #[error("line {line}: duplicate entry ({row}, {col}) in relation {relation}")]
    DuplicateEntry {
        line: usize,
        relation: usize,
        row: usize,
        col: usize,
    },

    #[error("line {line}: value {value} not admissible for {likelihood} relation {relation}")]
    DomainViolation {
        line: usize,
        relation: usize,
        value: f64,
        likelihood: Likelihood,
    },

    #[error("invalid schema: {0}")]
    InvalidSchema(ValidationReport),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("objective decreased by {drop:.3e} (relative {relative:.3e}) at iteration {iteration}")]
    Divergence {
        iteration: usize,
        drop: f64,
        relative: f64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty test set")]
    EmptyTestSet,

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
