use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] ewas_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 1 usage or config, 2 runtime abort, 3 IO or on-disk format.
    pub fn exit_code(&self) -> i32 {
        use ewas_core::Error as E;
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) | CliError::File { .. } | CliError::Csv(_) => 3,
            CliError::Core(e) => match e {
                E::Config(_) | E::Mode(_) | E::Input(_) => 1,
                E::Io(_) | E::Csv(_) | E::Checkpoint(_) | E::Data(_) => 3,
                _ => 2,
            },
        }
    }
}
