use gpssm::GpssmError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    pub(crate) fn io(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl From<GpssmError> for CliError {
    fn from(e: GpssmError) -> Self {
        match e {
            GpssmError::Io(_) | GpssmError::Format(_) => CliError::Io(e.to_string()),
            GpssmError::DimensionMismatch(_)
            | GpssmError::InvalidParameter(_)
            | GpssmError::IndexOutOfRange { .. }
            | GpssmError::TooLarge(_) => CliError::Usage(e.to_string()),
            GpssmError::DegenerateFactor { .. }
            | GpssmError::NotPositiveDefinite(_)
            | GpssmError::Numerical { .. }
            | GpssmError::Diverged(_) => CliError::Numerical(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
