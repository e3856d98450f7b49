use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or argument failed validation. `field` names the offending input.
    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("point cloud must contain at least one point")]
    EmptyCloud,

    #[error("non-finite coordinate at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: row {row} has {found} fields, expected {expected}")]
    RaggedRow {
        path: PathBuf,
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("{path}: row {row}, field {field}: cannot parse {value:?} as a number")]
    ParseField {
        path: PathBuf,
        row: usize,
        field: usize,
        value: String,
    },

    #[error("{path}: row {row}, field {field}: non-finite value {value:?}")]
    NonFiniteField {
        path: PathBuf,
        row: usize,
        field: usize,
        value: String,
    },

    #[error("{path}: malformed file: {message}")]
    Format { path: PathBuf, message: String },

    #[error("kernel bandwidth is zero (all sampled points coincide); configure a fixed bandwidth")]
    DegenerateBandwidth,

    #[error("duplicate centers with regularization beta = 0 give a singular kernel matrix; use beta > 0")]
    DuplicateCenters,

    #[error("conjugate gradient did not converge at t = {slice_time}: {iterations} iterations, relative residual {residual:e}")]
    CgNotConverged {
        slice_time: f64,
        iterations: usize,
        residual: f64,
    },

    #[error("non-finite state at step {step}, point {point}")]
    NonFiniteState { step: usize, point: usize },

    #[error("need at least {needed} points, have {available}")]
    InsufficientPoints { needed: usize, available: usize },
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs rather than failures during a computation.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::CgNotConverged { .. } | Error::NonFiniteState { .. }
        )
    }
}
