use latentphase::Error as CoreError;
use thiserror::Error;

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::InvalidArgument(_) => EXIT_CONFIG,
                CoreError::Data(_)
                | CoreError::VideoTooShort { .. }
                | CoreError::Calibration(_)
                | CoreError::Shape(_)
                | CoreError::Json(_) => EXIT_DATA,
                CoreError::Divergence { .. } | CoreError::RankDeficient { .. } => EXIT_DIVERGENCE,
                CoreError::Io { .. } => EXIT_OTHER,
            },
        }
    }
}
