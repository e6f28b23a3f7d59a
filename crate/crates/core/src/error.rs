use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero-norm embedding at index {index}")]
    ZeroNorm { index: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (batch seed {batch_seed})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        batch_seed: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) => 2,
            Error::Data(_) | Error::Io { .. } | Error::Image(_) | Error::Json(_) => 3,
            Error::NonFinite { .. } | Error::ZeroNorm { .. } => 4,
            Error::Shape(_) => 2,
        }
    }
}
