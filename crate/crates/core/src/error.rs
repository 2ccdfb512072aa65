use thiserror::Error;

/// Errors raised by the quasi-shadowing toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("structural error: {0}")]
    Structure(String),

    #[error("invalid splitting: {check} violated at n = {index} (value {value:.3e}, tolerance {tol:.3e})")]
    InvalidSplitting {
        check: &'static str,
        index: i64,
        value: f64,
        tol: f64,
    },

    #[error("unstable block ill-conditioned at n = {index}: smallest singular value {sigma:.3e}")]
    IllConditionedUnstable { index: i64, sigma: f64 },

    #[error("not dichotomic: {0}")]
    NotDichotomic(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("contraction condition violated: q = {q} (need q < 1)")]
    ContractionViolated { q: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("no convergence after {iterations} iterations (last step {last_step:.3e})")]
    MaxIterations { iterations: usize, last_step: f64 },

    #[error("contraction soundness: {0}")]
    ContractionSoundness(String),

    #[error("not invertible: {0}")]
    NotInvertible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
