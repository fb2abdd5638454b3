//! Command implementations behind the `cgc-lora` binary.
//!
//! Every command returns [`CliError`] on failure; [`CliError::exit_code`]
//! maps it to the stable exit-code contract (2 usage/config, 3 numeric).

pub mod config;
pub mod data;
pub mod run;
pub mod sweep;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] cgc_lora::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(cgc_lora::Error::NonFinite(_) | cgc_lora::Error::Numeric(_)) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub(crate) fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Creates `root/<prefix>-NNNN` with the first free number. Existing
/// directories are never reused.
pub(crate) fn fresh_dir(root: &Path, prefix: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    for n in 1.. {
        let dir = root.join(format!("{prefix}-{n:04}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir)(e)),
        }
    }
    unreachable!()
}
