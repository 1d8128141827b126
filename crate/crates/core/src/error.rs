use crate::numcore::{CheckpointError, NumError};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("latent has {found} layer codes, generator expects {expected}")]
    LatentLayers { found: usize, expected: usize },
    #[error("generator is frozen")]
    Frozen,
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("missing file: {0}")]
    Missing(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
