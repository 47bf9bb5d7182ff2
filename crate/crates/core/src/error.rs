use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid delay measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("off-grid time {0}")]
    OffGridTime(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A constant was requested outside the parameter range where it is defined.
    #[error("{0}")]
    Infeasible(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("singular flow matrix on path {path} at node {node}")]
    SingularFlow { path: usize, node: usize },

    #[error("regression failed: {0}")]
    Regression(String),

    #[error("solver failed at sweep {sweep}, node {node}: {source}")]
    Solver {
        sweep: usize,
        node: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite value in sweep {sweep} at node {node} (path {path})")]
    NonFinite { sweep: usize, node: usize, path: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
