use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact: {what} — run `ddnz {stage}` first")]
    MissingArtifact { what: String, stage: String },

    #[error(transparent)]
    Core(#[from] ddnz_core::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// Exit codes: 0 success, 2 config error, 3 missing artifact,
    /// 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Core(ddnz_core::Error::Numerical { .. }) => 4,
            CliError::Core(ddnz_core::Error::InvalidParameter { .. }) => 2,
            CliError::Core(ddnz_core::Error::OutputDirNotEmpty(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}
