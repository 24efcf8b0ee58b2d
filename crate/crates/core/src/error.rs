//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Schema construction or validation failed.
    #[error("schema error: {0}")]
    Schema(String),

    /// A cell could not be parsed or violated its declared coding.
    #[error("data error at row {row}, column `{column}`: {message}")]
    Cell {
        row: usize,
        column: String,
        message: String,
    },

    /// An operation received an argument outside its domain.
    #[error("invalid argument `{name}`: {message}")]
    InvalidArgument { name: &'static str, message: String },

    /// Both samples have zero variance but their means differ, so the
    /// standardized difference is undefined.
    #[error("degenerate variance: means differ but both sample variances are zero")]
    DegenerateVariance,

    /// A fit or aggregation step could not produce an estimate.
    #[error("estimation error: {0}")]
    Estimation(String),

    /// No tree holds a complete leaf for the requested treatment arm.
    #[error("undefined prediction for treatment arm {arm}: no complete leaf in any tree")]
    UndefinedPrediction { arm: u32 },

    /// Capacity constraints admit no assignment.
    #[error("infeasible constraints: {0}")]
    Infeasible(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
