//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cholesky factorization failed: {0}")]
    Factorization(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("graph error: {0}")]
    Graph(String),

    /// The detected region is empty or covers every pixel, so the contrast
    /// vector is undefined.
    #[error("no testable region (region size {region_size} of {n} pixels)")]
    UndefinedHypothesis { region_size: usize, n: usize },

    #[error("internal inconsistency: {0}")]
    Inconsistent(String),

    #[error("sweep exceeded {max_steps} steps (reached z = {z}, z_max = {z_max})")]
    SweepBudget { max_steps: usize, z: f64, z_max: f64 },

    #[error("training failed at epoch {epoch}, batch {batch}: {reason}")]
    Training {
        epoch: usize,
        batch: usize,
        reason: String,
        loss_trace: Vec<f64>,
    },

    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("calibration failed for {family}: {reason}")]
    Calibration { family: String, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(expected: usize, actual: usize) -> Self {
        Error::Shape { expected, actual }
    }
}
