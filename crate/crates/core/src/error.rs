use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-positive input: {0}")]
    NonPositiveInput(String),

    #[error("horizon {horizon} is not an integer multiple of dt = {dt}")]
    IncommensurateGrid { horizon: f64, dt: f64 },

    #[error("coarsening factor {factor} does not divide {n_steps} steps")]
    IndivisibleFactor { factor: usize, n_steps: usize },

    #[error("target path {index} has (near) zero L2 norm")]
    ZeroTargetNorm { index: usize },

    #[error("power kernel evaluated at zero lag")]
    SingularAtZero,

    #[error("non-finite value at grid node {node}{}", sample.map(|s| format!(" (sample {s})")).unwrap_or_default())]
    NonFinitePath { node: usize, sample: Option<usize> },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("loss node has length {0}, expected a scalar")]
    NonScalarLoss(usize),

    #[error("invalid dimensions: {0}")]
    BadDims(String),

    #[error("input grid does not match the grid the model is bound to")]
    GridMismatch,

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    DivergedLoss { epoch: usize, loss: f64 },

    #[error("degenerate fit: only {0} usable points")]
    DegenerateFit(usize),

    #[error("invalid configuration `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attach a sample index to a path failure.
    pub fn at_sample(self, index: usize) -> Self {
        match self {
            Error::NonFinitePath { node, .. } => Error::NonFinitePath {
                node,
                sample: Some(index),
            },
            other => other,
        }
    }
}
