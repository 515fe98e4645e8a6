use thiserror::Error;
use xct_core::Error as CoreError;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing input(s):\n  {}", .0.join("\n  "))]
    MissingInputs(Vec<String>),
    #[error("provenance error: {0}")]
    Provenance(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    /// 0 success, 1 validation/config, 2 missing input, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingInputs(_) => 2,
            CliError::Core(CoreError::Numerical { .. }) => 3,
            CliError::Core(CoreError::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        }
    }
}
