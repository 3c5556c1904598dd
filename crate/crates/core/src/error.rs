use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration record violates its invariants.
    #[error("config error: {0}")]
    Config(String),

    /// Two buffers that must agree in shape do not.
    #[error("shape error: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    /// A computation produced a non-finite value or failed to reach tolerance.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Adaptive quadrature ran out of subdivisions.
    #[error("quadrature did not converge: estimate {estimate}, achieved error {achieved:e}, requested {requested:e}")]
    Quadrature {
        estimate: f64,
        achieved: f64,
        requested: f64,
    },

    /// Newton iteration failed to converge.
    #[error("solver did not converge after {iterations} iterations: last iterate ({alpha}, {lambda}), residual {residual:e}")]
    Solver {
        iterations: usize,
        alpha: f64,
        lambda: f64,
        residual: f64,
    },

    /// A grid point failed during a scan.
    #[error("grid scan aborted at (mu={mu}, omega={omega}, nu={nu}, tau={tau}): {source}")]
    GridPoint {
        mu: f64,
        omega: f64,
        nu: f64,
        tau: f64,
        #[source]
        source: Box<Error>,
    },

    /// A backward pass was handed a cache from an older forward pass.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Dataset content is unusable.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed IDX file.
    #[error("parse error in {path} at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable category name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::Numeric(_) => "numeric",
            Error::Quadrature { .. } => "quadrature",
            Error::Solver { .. } => "solver",
            Error::GridPoint { .. } => "grid_point",
            Error::Contract(_) => "contract",
            Error::Data(_) => "data",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
