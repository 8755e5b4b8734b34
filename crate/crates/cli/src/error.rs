use std::path::PathBuf;

use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    /// Malformed JSON, wrong types or unknown keys.
    #[error("{}: parse error at line {line}, column {column} (key `{key}`): {message}", path.display())]
    Parse {
        path: PathBuf,
        key: String,
        line: usize,
        column: usize,
        message: String,
    },
    /// Well-formed file whose values break an invariant.
    #[error("{}: {message}", path.display())]
    Validation { path: PathBuf, message: String },
    #[error("invalid arguments: {0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("simulation diverged at t = {time_s} s")]
    Diverged { time_s: f64 },
    #[error(transparent)]
    Core(#[from] phasebuck::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Validation { .. } | CliError::Usage(_) => EXIT_CONFIG,
            CliError::Io { .. } => EXIT_IO,
            CliError::Diverged { .. } => EXIT_DIVERGED,
            CliError::Core(e) => match e {
                phasebuck::Error::Config(_) => EXIT_CONFIG,
                phasebuck::Error::Io(_) | phasebuck::Error::Csv(_) => EXIT_IO,
                phasebuck::Error::EmptyTrace => EXIT_DIVERGED,
            },
        }
    }

    /// Short machine-readable tag for error.json.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Parse { .. } => "parse",
            CliError::Validation { .. } => "validation",
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Diverged { .. } => "diverged",
            CliError::Core(phasebuck::Error::Config(_)) => "validation",
            CliError::Core(_) => "core",
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
