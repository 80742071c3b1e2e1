use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Core {
        context: &'static str,
        #[source]
        source: pdtool_core::Error,
    },
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("trace rejected: {0}")]
    Trace(String),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

/// Attaches a module name to core errors.
pub(crate) trait Context<T> {
    fn context(self, context: &'static str) -> Result<T>;
}

impl<T> Context<T> for pdtool_core::Result<T> {
    fn context(self, context: &'static str) -> Result<T> {
        self.map_err(|source| HarnessError::Core { context, source })
    }
}

impl<T> Context<T> for Result<T, pdtool_core::graph::GraphError> {
    fn context(self, context: &'static str) -> Result<T> {
        self.map_err(|e| HarnessError::Core {
            context,
            source: e.into(),
        })
    }
}
