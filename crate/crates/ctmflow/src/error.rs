use std::io;
use std::path::PathBuf;

use ctmflow_core::CoreError;

/// Errors surfaced by the command line and file layer.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("schema mismatch in {path}: expected columns {expected:?}, found {found:?}")]
    Schema { path: PathBuf, expected: Vec<String>, found: Vec<String> },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("data file {path} not found; expected a CSV with header columns {columns:?}")]
    MissingData { path: PathBuf, columns: Vec<String> },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        CliError::Parse { path: path.into(), message: message.to_string() }
    }

    /// Process exit code: 2 config or schema, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Schema { .. } | CliError::Parse { .. } => 2,
            CliError::Io { .. } | CliError::MissingData { .. } => 4,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::UnknownFeature(_) | CoreError::MissingState(_) | CoreError::Dimension(_) => 2,
                CoreError::NonFinite { .. }
                | CoreError::Jacobian { .. }
                | CoreError::OutOfRange(_)
                | CoreError::Numeric(_)
                | CoreError::Diverged(_)
                | CoreError::DegenerateOutcome(_) => 3,
            },
        }
    }
}
