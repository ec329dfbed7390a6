use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("tube mask: {0}")]
    Mask(String),
    #[error("loss input: {0}")]
    Loss(String),
    #[error("data: {0}")]
    Data(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("gradient present on frozen parameter {0}")]
    FreezeLeak(String),
    #[error("missing gradient for trainable parameter {0}")]
    MissingGradient(String),
    #[error("non-finite loss at step {step}: total={total} vtc={vtc} mbta={mbta} mbca={mbca}")]
    NonFiniteLoss {
        step: u64,
        total: f64,
        vtc: f64,
        mbta: f64,
        mbca: f64,
    },
    #[error("checkpoint corrupted: {0}")]
    Corrupt(String),
    #[error("incompatible config, differing fields: {}", .0.join(","))]
    Incompatible(Vec<String>),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable tag for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Config(_) => "config",
            Error::Mask(_) => "mask",
            Error::Loss(_) => "loss",
            Error::Data(_) => "data",
            Error::UnknownParam(_) => "unknown_param",
            Error::FreezeLeak(_) => "freeze_leak",
            Error::MissingGradient(_) => "missing_gradient",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Corrupt(_) => "corrupt",
            Error::Incompatible(_) => "incompatible",
            Error::Eval(_) => "eval",
            Error::Invariant(_) => "invariant",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
