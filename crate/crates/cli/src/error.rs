use thiserror::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Lib(#[from] zmask::Error),
}

impl CliError {
    /// Library errors raised while reading configuration-referenced files.
    pub fn from_config(e: zmask::Error) -> Self {
        match e {
            zmask::Error::Io { .. } | zmask::Error::Json { .. } | zmask::Error::InvalidArgument(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Lib(other),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Lib(zmask::Error::Divergence { .. }) => EXIT_DIVERGENCE,
            CliError::Lib(zmask::Error::InvalidArgument(_)) => EXIT_CONFIG,
            CliError::Lib(_) => EXIT_DATA,
        }
    }
}
