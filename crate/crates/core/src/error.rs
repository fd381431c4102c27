use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("scale parameter must be positive, got {0}")]
    NonPositiveScale(f64),

    #[error("all mixture coefficients are zero")]
    ZeroMixture,

    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("keypoint count {k_total} is not divisible by group size {k_g}")]
    Indivisible { k_total: usize, k_g: usize },

    #[error("skeleton `{0}` has no preset grouping")]
    NoPresetGrouping(String),

    #[error("no visible keypoints in ground truth")]
    NoVisibleKeypoints,

    #[error("rejection sampling exhausted {tries} tries; widen the maxIoU range (currently [{lo}, {hi}])")]
    RejectionBudget { tries: usize, lo: f64, hi: f64 },

    #[error("non-finite loss at iteration {iter}: {detail}")]
    NonFiniteLoss { iter: usize, detail: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
