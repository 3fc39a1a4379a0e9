use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ray is parallel to the detector plane")]
    RayParallelToDetector,
    #[error("point lies behind the x-ray source")]
    BehindSource,
    #[error("instrument axis is (nearly) aligned with the viewing ray")]
    DegenerateAxis,
    #[error("tilt {0}° is not reachable for this viewing ray")]
    InvalidTilt(f64),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("principal ray misses the volume: {0}")]
    EmptyScene(String),
    #[error("estimate ({0:.2}, {1:.2}) lies outside the image")]
    EstimateOutOfImage(f64, f64),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    DivergenceDetected { epoch: usize, loss: f64 },
    #[error("all points coincide")]
    DegeneratePoints,
    #[error("lines are nearly parallel ({0:.3}°)")]
    NearParallel(f64),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("x values are degenerate (fewer than two distinct values)")]
    DegenerateX,
    #[error("size {size} exceeds the {available} available training images")]
    SizeExceedsDataset { size: usize, available: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Format(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
