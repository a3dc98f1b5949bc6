use lesionseg::ErrorKind;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] lesionseg::Error),
    #[error("gradient check failed: {0}")]
    Gradcheck(String),
}

impl CliError {
    /// 0 success, 1 usage or configuration, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            },
            CliError::Gradcheck(_) => 3,
        }
    }
}
