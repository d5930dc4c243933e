use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("unsupported layer for this kernel: {0}")]
    UnsupportedLayer(String),

    #[error("memory budget exceeded: need {required} bytes, budget is {budget} bytes")]
    MemoryBudget { required: u64, budget: u64 },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("training diverged at step {step}: batch loss {loss:e} exceeds {limit:e}")]
    Diverged { step: u64, loss: f64, limit: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("insufficient samples: requested {requested}, available {available}")]
    InsufficientSamples { requested: usize, available: usize },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("scaling fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),

    #[error("learning curve contains non-positive error {0}")]
    NonPositiveError(f64),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing snapshot for step {0}")]
    MissingSnapshot(u64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
