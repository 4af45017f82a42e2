use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible alignment: {labels} labels need at least {required} frames, got {frames}")]
    InfeasibleAlignment {
        labels: usize,
        required: usize,
        frames: usize,
    },

    #[error("error rate undefined: reference corpus has zero length")]
    UndefinedRate,

    #[error("pretraining did not converge: general dev WER {wer:.2}% above threshold {threshold:.2}% after {epochs} epochs")]
    Convergence { wer: f64, threshold: f64, epochs: usize },

    #[error("gradient explosion: gradient norm {norm} is not finite")]
    GradientExplosion { norm: f64 },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
