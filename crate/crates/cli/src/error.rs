use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("solver error: {0}")]
    Solver(String),
    #[error("diff failure: {0}")]
    Diff(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit status.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Solver(_) => 3,
            Self::Diff(_) => 4,
            Self::Io(_) => 1,
        }
    }
}

impl From<empc_core::Error> for CliError {
    fn from(e: empc_core::Error) -> Self {
        match e {
            empc_core::Error::Config(m) => Self::Config(m),
            other => Self::Solver(other.to_string()),
        }
    }
}
