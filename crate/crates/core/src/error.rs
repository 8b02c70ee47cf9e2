use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected a tensor of rank {expected}, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },

    #[error("tensor of shape {shape:?} needs {expected} elements, got {got}")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("model configuration error: {0}")]
    Config(String),

    #[error("{0} is not initialized")]
    Uninitialized(&'static str),

    #[error("batch norm running statistics were never recorded; run a training-mode pass first")]
    UninitializedStats,

    #[error("no gradient recorded for the requested tensor; run backward first")]
    MissingGradient,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("region {region:?} lies outside a {height}x{width} map")]
    OutOfBounds {
        region: [usize; 4],
        height: usize,
        width: usize,
    },

    #[error("generator spec error: {0}")]
    Spec(String),

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error("config line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("stage `{stage}` failed on fold {fold}: {source}")]
    Stage {
        stage: &'static str,
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
