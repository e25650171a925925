//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(String),
    #[error("matrix is not a rotation: {0}")]
    InvalidRotation(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("pose token {token} out of range (codebook size {size})")]
    InvalidToken { token: usize, size: usize },
    #[error("invalid segment layout: {0}")]
    InvalidSegments(String),
    #[error("sequence length {len} exceeds context length {ctx}")]
    ContextOverflow { len: usize, ctx: usize },
    #[error("invalid task sample: {0}")]
    InvalidSample(String),
    #[error("unknown task: {0}")]
    InvalidTask(String),
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("skeleton projects outside the image frame: {0}")]
    OutOfFrame(String),
    #[error("no source-pose candidate satisfies the difference threshold")]
    NoCandidate,
    #[error("zero-norm embedding at row {0}")]
    DegenerateEmbedding(usize),
    #[error("degenerate joint configuration for alignment: {0}")]
    DegenerateAlignment(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("missing prerequisite: {0}")]
    MissingDependency(String),
    #[error("frozen parameter drift detected: {0}")]
    FrozenViolation(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("archive error: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for configuration problems, 3 for
    /// missing pipeline prerequisites, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::InvalidSpec(_) | Error::InvalidArgument(_) => 2,
            Error::MissingDependency(_) => 3,
            _ => 1,
        }
    }
}
