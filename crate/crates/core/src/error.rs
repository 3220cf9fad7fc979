use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("unknown label colour {color:?} found on {count} pixel(s)")]
    UnknownColor { color: [u8; 3], count: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing file {path}: {what}")]
    MissingFile { path: PathBuf, what: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: u64, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::MissingFile { .. } => 2,
            Error::Divergence { .. } | Error::NonFinite(_) => 4,
            _ => 3,
        }
    }

    /// Short machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non-finite",
            Error::UnknownColor { .. } => "unknown-color",
            Error::Config(_) => "config",
            Error::MissingFile { .. } => "missing-file",
            Error::Data(_) => "data",
            Error::Divergence { .. } => "divergence",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}
