use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("not found: {0}")]
    NotFound(PathBuf),
    #[error("malformed mesh: {0}")]
    MalformedMesh(String),
    #[error("no uv atlas")]
    NoUvAtlas,
    #[error("uv atlas overlaps: faces {0} and {1}")]
    UvOverlap(usize, usize),
    #[error("rank deficient: {0}")]
    RankDeficient(&'static str),
    #[error("nicp solver failure: {0}")]
    NicpSolver(String),
    #[error("no overlap between template and target")]
    NoOverlap,
    #[error("topology mismatch")]
    TopologyMismatch,
    #[error("incomplete grid: missing identity {identity}, expression {expression}")]
    IncompleteGrid { identity: usize, expression: usize },
    #[error("rank too large: requested {requested}, dimension {dimension}")]
    RankTooLarge { requested: usize, dimension: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("resolution mismatch: expected {expected}, got {got}")]
    ResolutionMismatch { expected: usize, got: usize },
    #[error("unsupported resolution {0}")]
    UnsupportedResolution(usize),
    #[error("face not visible")]
    FaceNotVisible,
    #[error("pose init failed: {0}")]
    PoseInitFailed(String),
    #[error("zero-size viewport")]
    EmptyViewport,
    #[error("linear solve failed: {0}")]
    Solver(String),
    #[error("expression {index}: {source}")]
    Expression {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn at_expression(self, index: usize) -> Self {
        Error::Expression {
            index,
            source: Box::new(self),
        }
    }
}
