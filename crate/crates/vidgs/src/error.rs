use std::path::{Path, PathBuf};
use std::process::ExitCode;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Core(#[from] vidgs_core::Error),
    /// A core error tied to an input file.
    #[error("{}: {source}", path.display())]
    CoreAt { path: PathBuf, source: vidgs_core::Error },
}

pub const EXIT_USAGE: u8 = 64;
pub const EXIT_DECOMPOSITION: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_IO: u8 = 4;

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn format(path: impl AsRef<Path>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.as_ref().to_path_buf(), reason: reason.into() }
    }

    pub fn usage(reason: impl Into<String>) -> Self {
        Error::Usage(reason.into())
    }

    fn core(&self) -> Option<&vidgs_core::Error> {
        match self {
            Error::Core(e) | Error::CoreAt { source: e, .. } => Some(e),
            _ => None,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match (self, self.core()) {
            (Error::Usage(_), _) => EXIT_USAGE,
            (_, Some(vidgs_core::Error::Decomposition { .. })) => EXIT_DECOMPOSITION,
            (_, Some(vidgs_core::Error::Diverged { .. })) => EXIT_DIVERGED,
            _ => EXIT_IO,
        }
    }

    pub fn to_exit(&self) -> ExitCode {
        ExitCode::from(self.exit_code())
    }
}

pub(crate) trait IoContext<T> {
    fn at(self, path: impl AsRef<Path>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl AsRef<Path>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}

impl<T> IoContext<T> for vidgs_core::Result<T> {
    fn at(self, path: impl AsRef<Path>) -> Result<T> {
        self.map_err(|source| Error::CoreAt { path: path.as_ref().to_path_buf(), source })
    }
}
