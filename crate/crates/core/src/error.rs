use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch on {axis}: {detail}")]
    ShapeMismatch { axis: String, detail: String },

    #[error("unsupported spatial rank {0}, expected 2 or 3")]
    UnsupportedRank(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("spatial dims {dims:?} must be divisible by {multiple}; pad the input to a multiple of {multiple}")]
    PaddingNeeded { dims: Vec<usize>, multiple: usize },

    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),

    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("data error: {0}")]
    Data(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("no path between seeds {from:?} and {to:?}")]
    NoPath { from: Vec<usize>, to: Vec<usize> },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            axis: axis.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
