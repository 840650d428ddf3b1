use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] tnt_core::Error),

    #[error("config error in {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 2 for configuration problems, 3 for data and file-format problems.
    pub fn exit_code(&self) -> i32 {
        use tnt_core::Error as E;
        match self {
            CliError::Json { .. } | CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                E::Config(_) | E::Usage(_) | E::Schedule(_) | E::Unsupported(_) => 2,
                E::Format { .. } | E::Io(_) | E::Domain(_) | E::Shape { .. } => 3,
                E::Training { .. } => 1,
            },
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}
