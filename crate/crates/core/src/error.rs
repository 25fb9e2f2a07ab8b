use std::path::PathBuf;

pub type Result<T, E = DacError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum DacError {
    /// Arguments disagree on shape; a caller bug rather than bad input.
    #[error("shape contract violated: {0}")]
    Shape(String),

    #[error("{what} out of range: {detail}")]
    Range { what: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("non-finite activations at layer `{layer}`")]
    Numeric { layer: String },

    #[error("sampling diverged at timestep {timestep}")]
    SamplingDiverged { timestep: usize },

    #[error("training aborted at iteration {iteration} (t = {timestep}): {reason}")]
    Training {
        iteration: usize,
        timestep: usize,
        reason: String,
    },

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("invalid session state: {0}")]
    State(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DacError {
    pub(crate) fn range(what: &'static str, detail: impl Into<String>) -> Self {
        Self::Range {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Self::Load {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
