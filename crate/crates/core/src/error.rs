use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    Mesh(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("inadmissible state: {0}")]
    Inadmissible(String),

    #[error("solver failure at t = {time} in element {element}: {reason}")]
    SolverFailure {
        time: f64,
        element: usize,
        reason: String,
    },

    #[error("degenerate error threshold: {0}")]
    DegenerateThreshold(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss during update: {0}")]
    NonFiniteLoss(String),

    #[error("unknown problem: {0}")]
    UnknownProblem(String),

    #[error("reference mismatch: {0}")]
    ReferenceMismatch(String),

    #[error("degenerate reference runs: {0}")]
    DegenerateReference(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures raised while evolving the PDE (bad states, solver
    /// breakdown), as opposed to configuration or I/O problems.
    pub fn is_solver_failure(&self) -> bool {
        matches!(self, Error::Inadmissible(_) | Error::SolverFailure { .. })
    }
}
