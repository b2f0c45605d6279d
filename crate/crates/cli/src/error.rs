use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{path:?} is locked by another run ({lock:?} exists)")]
    Locked { path: PathBuf, lock: PathBuf },

    #[error(transparent)]
    Core(#[from] pvudf::Error),

    #[error("self-test failed: {0}")]
    SelfTest(String),
}

impl CliError {
    /// 0 success, 1 configuration, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        use pvudf::Error as E;
        match self {
            CliError::Config(_) | CliError::Locked { .. } => 1,
            CliError::Core(E::InvalidConfig(_)) => 1,
            CliError::Core(E::Numerical(_)) | CliError::SelfTest(_) => 3,
            CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
