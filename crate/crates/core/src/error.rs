use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The requested speed-bump design has no implementation on this path.
    #[error("unsupported design: {0}")]
    UnsupportedDesign(String),

    #[error("degenerate column `{0}`: fewer than two distinct values")]
    DegenerateColumn(String),

    #[error("collinear regressors: {}", .0.join(", "))]
    Collinear(Vec<String>),

    #[error("{what} did not converge after {iterations} iterations")]
    NonConvergence { what: String, iterations: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid specification: {0}")]
    Spec(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
