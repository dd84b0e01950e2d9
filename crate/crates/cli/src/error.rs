use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    /// A stage's input was never produced.
    #[error("missing dependency: {0}")]
    Dependency(String),

    /// An input changed after the stage that consumed it ran.
    #[error("stale artifact: {0}")]
    Stale(String),

    #[error(transparent)]
    Core(#[from] mrgr_core::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    /// 1 for internal failures, 2 for anything the user can fix.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Core(mrgr_core::Error::Numeric(_)) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
