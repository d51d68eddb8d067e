use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("weight layout does not match the network spec: {0}")]
    LayoutMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("time step {t} out of range for {steps} steps")]
    StepOutOfRange { t: usize, steps: usize },

    #[error(
        "sampler diverged at reverse step {step}{}{}",
        member.map(|i| format!(", weight draw {i}")).unwrap_or_default(),
        sample.map(|j| format!(", sample {j}")).unwrap_or_default()
    )]
    SamplerDiverged {
        step: usize,
        member: Option<usize>,
        sample: Option<usize>,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    TrainingDiverged { epoch: usize, batch: usize },

    #[error("strategy provides {available} weight draws but {requested} were requested")]
    InsufficientMembers { available: usize, requested: usize },

    #[error("sample matrix needs at least {needed} draws along the {axis} axis, got {got}")]
    TooFewSamples {
        axis: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("decomposition identity violated: total {total} vs aleatoric + epistemic {sum}")]
    DecompositionIdentity { total: f64, sum: f64 },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("data format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
