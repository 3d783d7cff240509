use std::path::PathBuf;

/// Error type shared across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("ingest error: {0}")]
    Ingest(String),

    #[error("degrade error: {0}")]
    Degrade(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("padding error: {0}")]
    Pad(String),

    #[error("parameter transfer error: {0}")]
    Transfer(String),

    #[error("numerics error: {0}")]
    Numerics(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("ensemble error: {0}")]
    Ensemble(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("refusing to overwrite {0} (pass --overwrite)")]
    WouldClobber(PathBuf),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
