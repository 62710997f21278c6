use thiserror::Error;

/// Errors produced by the synchronization solvers and the experiment harness.
///
/// Node and edge indices carried by the variants are 0-based.
#[derive(Debug, Error)]
pub enum SyncError {
    #[error("graph is not quasi-strongly connected")]
    NonQscGraph,
    #[error("graph is not connected")]
    DisconnectedGraph,
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("no transform stored for edge ({0}, {1})")]
    MissingTransform(usize, usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },
    #[error("frame {frame} block is singular (condition number {cond:.3e})")]
    SingularBlock { frame: usize, cond: f64 },
    #[error("edge ({i}, {j}) transform is singular (condition number {cond:.3e})")]
    SingularEdgeMatrix { i: usize, j: usize, cond: f64 },
    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },
    #[error("gap denominator f is zero while g = {g:.3e}")]
    ZeroDenominator { g: f64 },
    #[error("step size fell below {floor:.1e} while integrating the gradient flow")]
    StepSizeUnderflow { floor: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("internal consistency check failed: {0}")]
    Consistency(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, SyncError>;
