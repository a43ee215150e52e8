use std::path::PathBuf;

use thiserror::Error;

/// Process exit status for each failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Config = 2,
    Data = 3,
    Weights = 4,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Core {
        kind: ExitKind,
        context: String,
        #[source]
        source: adet_core::Error,
    },

    #[error("{what} not found: {}", path.display())]
    Missing {
        kind: ExitKind,
        what: &'static str,
        path: PathBuf,
    },
}

impl CliError {
    pub fn exit_kind(&self) -> ExitKind {
        match self {
            CliError::Config(_) => ExitKind::Config,
            CliError::Core { kind, .. } | CliError::Missing { kind, .. } => *kind,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Attaches a failure class and context to core errors. Configuration
/// errors from the core always map to the config class.
pub trait Classify<T> {
    fn or_exit(self, kind: ExitKind, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Classify<T> for adet_core::Result<T> {
    fn or_exit(self, kind: ExitKind, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| {
            let kind = match source {
                adet_core::Error::Config(_) => ExitKind::Config,
                _ => kind,
            };
            CliError::Core {
                kind,
                context: context(),
                source,
            }
        })
    }
}
