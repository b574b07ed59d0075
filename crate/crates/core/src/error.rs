use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate homography: no valid sample after {0} tries")]
    DegenerateHomography(usize),
    #[error("point at infinity (|w| = {0:e})")]
    PointAtInfinity(f64),
    #[error("need at least 4 correspondences, got {0}")]
    InsufficientMatches(usize),
    #[error("homography estimation failed: {0}")]
    EstimationFailed(String),
    #[error("no keypoints detected")]
    NoKeypoints,
    #[error("tensor file format error: {0}")]
    Format(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite data in {0}")]
    NonFiniteData(String),
    #[error("empty feature set")]
    EmptyFeatureSet,
    #[error("degenerate GMM component {0}")]
    DegenerateCluster(usize),
    #[error("non-finite loss at batch {0}")]
    NonFiniteLoss(usize),
    #[error("empty evaluation")]
    EmptyEvaluation,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
