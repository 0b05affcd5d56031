use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Where in a wavelet cascade a sampler failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Coarse { scale: usize },
    Detail { scale: usize },
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Coarse { scale } => write!(f, "coarse field at scale {scale}"),
            Stage::Detail { scale } => write!(f, "detail coefficients at scale {scale}"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("resource cap exceeded: {0}")]
    Resource(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("numerical divergence at reverse step {step}{}", stage.map(|s| format!(" ({s})")).unwrap_or_default())]
    Divergence { step: usize, stage: Option<Stage> },
    #[error("training diverged at time index {time_index}")]
    Training { time_index: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn resource(msg: impl Into<String>) -> Self {
        Error::Resource(msg.into())
    }

    /// Attach a cascade stage to a divergence error; other errors pass through.
    pub fn at_stage(self, stage: Stage) -> Self {
        match self {
            Error::Divergence { step, .. } => Error::Divergence { step, stage: Some(stage) },
            other => other,
        }
    }
}
