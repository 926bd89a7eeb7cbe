use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in {location}: {detail}")]
    Numerical { location: String, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(
        "sample budget exhausted after {used} samples: {positives} positive, {negatives} negative \
         (target {target} per class)"
    )]
    Budget {
        used: usize,
        positives: usize,
        negatives: usize,
        target: usize,
    },

    #[error("degenerate class prior alpha = {0}; guidance is undefined")]
    DegeneratePrior(f64),

    #[error("undefined at this point: {0}")]
    Undefined(String),

    #[error("quadrature did not reach tolerance: {0}")]
    Quadrature(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn numerical(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            location: location.into(),
            detail: detail.into(),
        }
    }
}
