use numkit::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("QP solver hit its iteration cap ({0})")]
    SolverStalled(String),
    #[error("sampling failed: {0}")]
    Sampling(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("exact construction impossible: {0}")]
    Construction(String),
    #[error("no region contains the query point {0}")]
    NoRegion(String),
    #[error("invalid projection: {0}")]
    Projection(String),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
