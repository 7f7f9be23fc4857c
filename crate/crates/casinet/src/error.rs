use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("parameter error: {0}")]
    Param(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("corrupt tensor file: {0}")]
    CorruptTensor(String),

    #[error("corrupt image file: {0}")]
    CorruptImage(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("affinity overflow; reduce initialization scale (|dot| = {0:.1} > 500)")]
    AffinityOverflow(f64),

    #[error("all pixels ignored")]
    AllPixelsIgnored,

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("data generation failed: {0}")]
    DataGen(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
