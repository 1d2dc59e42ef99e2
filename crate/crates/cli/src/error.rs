use std::path::Path;

/// Failures grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure ({context}): {source}")]
    Numerical {
        context: String,
        #[source]
        source: treeagg_core::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical { .. } => 4,
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }

    pub fn numerical(context: impl Into<String>, source: treeagg_core::Error) -> Self {
        CliError::Numerical { context: context.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
