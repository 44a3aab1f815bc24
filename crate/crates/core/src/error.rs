use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point is behind the camera (z = {z:.4} m)")]
    BehindCamera { z: f64 },
    #[error("projection ({u:.1}, {v:.1}) falls outside the image")]
    OutOfFrame { u: f64, v: f64 },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("planes are nearly parallel")]
    NearParallel,
    #[error("no depth-continuous edges found in the point cloud")]
    NoEdgesFound,
    #[error("image is empty")]
    EmptyImage,
    #[error("edge pixel set holds {available} pixels, {requested} requested")]
    InsufficientPixels { available: usize, requested: usize },
    #[error("neighborhood points are degenerate")]
    DegeneratePoints,
    #[error("only {found} correspondences, at least {required} required")]
    TooFewCorrespondences { found: usize, required: usize },
    #[error("normal equations are rank deficient (condition number {condition:.3e})")]
    RankDeficient { condition: f64 },
    #[error("optimization did not converge after {iterations} iterations")]
    NotConverged { iterations: usize },
    #[error("no scene edges are visible from the camera")]
    NoVisibleEdges,
    #[error("{path}: parse error at {location}: {message}")]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },
    #[error("{path}: unsupported format: {message}")]
    UnsupportedFormat { path: PathBuf, message: String },
    #[error("{path}: missing key `{key}`")]
    MissingKey { path: PathBuf, key: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("scene `{scene}`: {source}")]
    Scene {
        scene: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn in_scene(self, scene: impl Into<String>) -> Self {
        Error::Scene {
            scene: scene.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error with any scene wrapping removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Scene { source, .. } => source.root(),
            other => other,
        }
    }
}
