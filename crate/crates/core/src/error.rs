use std::path::PathBuf;

/// Errors produced anywhere in the matching pipeline.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("projected point has a vanishing homogeneous coordinate")]
    DegeneratePoint,
    #[error("matrix is singular")]
    SingularMatrix,
    #[error("design matrix is rank deficient (rank < 8)")]
    RankDeficient,
    #[error("need at least 4 usable matches, got {0}")]
    InsufficientMatches(usize),
    #[error("empty input")]
    EmptyInput,
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("image too small: {width}x{height}, need at least 3x3")]
    ImageTooSmall { width: usize, height: usize },
    #[error("mask has no foreground pixel")]
    EmptyMask,
    #[error("bad stride {0}")]
    BadStride(usize),
    #[error("descriptor window centred at ({x}, {y}) lies outside the image")]
    WindowOutOfRange { x: usize, y: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("attention needs at least one key")]
    EmptyKeys,
    #[error("point set is degenerate (all points coincide)")]
    DegenerateSet,
    #[error("zero denominator in distance ratio")]
    ZeroDenominator,
    #[error("zero-length difference vector")]
    DegenerateVector,
    #[error("need at least 2 matches for a compatibility matrix, got {0}")]
    TooFewMatches(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("correlation window touches the grid border")]
    BorderSkip,
    #[error("ground truth holds no matches")]
    EmptyGroundTruth,
    #[error("no mask images found in {0}")]
    NoMasks(PathBuf),
    #[error("pipeline degenerate: {0}")]
    PipelineDegenerate(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed weight file: {0}")]
    WeightFormat(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec failure on {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
