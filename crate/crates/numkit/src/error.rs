use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not symmetric positive definite ({0})")]
    NotSpd(String),
    #[error("matrix is singular: {0}")]
    Singular(String),
    #[error("{what} did not converge within {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}
