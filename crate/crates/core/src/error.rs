use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("element {index} = {value} is not representable in {precision}")]
    NotRepresentable {
        index: usize,
        value: f64,
        precision: crate::Precision,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("singular shifting matrix: {0}")]
    Singular(String),

    #[error("fixed-point iteration did not converge after {iterations} iterations (last relative change {last_change:e})")]
    Divergence { iterations: usize, last_change: f64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
