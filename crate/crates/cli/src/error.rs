use std::error::Error as StdError;

/// Configuration problems exit with 1, failures while doing the work with 2.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{step} failed: {source}")]
    Runtime {
        step: String,
        #[source]
        source: Box<dyn StdError + Send + Sync>,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime { .. } => 2,
        }
    }
}

/// Tags a runtime error with the step that produced it.
pub trait Step<T> {
    fn step(self, step: impl Into<String>) -> Result<T, CliError>;
}

impl<T, E: Into<Box<dyn StdError + Send + Sync>>> Step<T> for Result<T, E> {
    fn step(self, step: impl Into<String>) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime {
            step: step.into(),
            source: e.into(),
        })
    }
}
