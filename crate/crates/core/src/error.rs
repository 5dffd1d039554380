use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GeoErmError>;

#[derive(Debug, Error)]
pub enum GeoErmError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not orthonormal: ‖AᵀA − I‖_F = {residual:e}")]
    NotOrthonormal { residual: f64 },

    #[error("matrix is not symmetric positive definite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("degenerate retraction: smallest singular value of A + H is {sigma_min:e}")]
    DegenerateRetraction { sigma_min: f64 },

    #[error("degenerate projection: matrix is rank deficient (σ_min = {sigma_min:e})")]
    DegenerateProjection { sigma_min: f64 },

    #[error("{what} did not converge after {iterations} iterations")]
    Convergence { what: &'static str, iterations: usize },

    #[error("loss kind mismatch: expected {expected}, task is {found}")]
    KindMismatch { expected: &'static str, found: &'static str },

    #[error("classification response at row {row} is {value}, expected 0 or 1")]
    InvalidLabel { row: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("optimizer state error: {0}")]
    State(String),

    #[error("divergence detected at iteration {iteration}: non-finite {what}")]
    Divergence { iteration: usize, what: &'static str },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {message}", file.display())]
    Ingest {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("HAR dataset not found: {}. Expected the UCI HAR layout (train/X_train.txt, train/y_train.txt, train/subject_train.txt and test/ counterparts); download it manually and pass --data-dir", path.display())]
    MissingData { path: PathBuf },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl GeoErmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GeoErmError::Io {
            path: path.into(),
            source,
        }
    }
}
