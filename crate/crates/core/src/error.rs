use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("schema mismatch: expected {expected}, got {actual}")]
    SchemaMismatch { expected: usize, actual: usize },
    #[error("category index {index} out of range for attribute `{attribute}` (cardinality {cardinality})")]
    IndexOutOfRange {
        attribute: String,
        index: usize,
        cardinality: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("degenerate pair: exclusive count {exclusive} of {total} attributes")]
    DegeneratePair { exclusive: usize, total: usize },
    #[error("decomposed distance is zero")]
    ZeroDistance,
    #[error("batch too small: {0}")]
    BatchTooSmall(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("too few identities: {0}")]
    TooFewIdentities(usize),
    #[error("gallery is empty after filtering")]
    EmptyGallery,
    #[error("no query has a true match in the gallery")]
    NoValidQueries,
    #[error("unknown image `{0}`")]
    UnknownImage(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("person ids missing from attribute table: {0:?}")]
    MissingAttributes(Vec<u32>),
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),
    #[error("bad tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
