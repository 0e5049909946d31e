use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rank-deficient basis: row {row} has norm {norm:e} after projection")]
    RankDeficient { row: usize, norm: f64 },

    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Divergence {
        epoch: usize,
        step: usize,
        reason: String,
    },

    #[error("video too short: {frames} frames, need {needed}")]
    VideoTooShort { frames: usize, needed: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
