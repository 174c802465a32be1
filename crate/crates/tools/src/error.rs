use std::fmt;
use std::path::PathBuf;

/// Tooling error: IO with path context, format violations, and core errors.
#[derive(Debug)]
pub enum Error {
    Io { path: PathBuf, source: std::io::Error },
    Json { path: PathBuf, source: serde_json::Error },
    /// Checkpoint file does not start with the expected magic.
    BadMagic { path: PathBuf },
    /// Checkpoint format version is not the one this build writes.
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },
    /// Checkpoint data section is shorter than the header promises.
    TruncatedData { path: PathBuf, detail: String },
    /// A stored parameter disagrees with the config's expected shape/name.
    ParamMismatch { path: PathBuf, detail: String },
    /// Malformed corpus or PPM content.
    Format { path: PathBuf, detail: String },
    /// Checkpoint and corpus disagree on image dimensions.
    DimMismatch { detail: String },
    /// Training aborted on a non-finite loss; a checkpoint was still written.
    NonFiniteLoss { iteration: u64 },
    Config { detail: String },
    Core(laneid_core::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::Json { path, source } => write!(f, "{}: invalid JSON: {source}", path.display()),
            Error::BadMagic { path } => write!(f, "{}: not a MOKA checkpoint (bad magic)", path.display()),
            Error::VersionMismatch { path, found, expected } => write!(
                f,
                "{}: checkpoint format version {found}, this build reads version {expected}",
                path.display()
            ),
            Error::TruncatedData { path, detail } => {
                write!(f, "{}: truncated data: {detail}", path.display())
            }
            Error::ParamMismatch { path, detail } => {
                write!(f, "{}: parameter table mismatch: {detail}", path.display())
            }
            Error::Format { path, detail } => write!(f, "{}: {detail}", path.display()),
            Error::DimMismatch { detail } => write!(f, "dimension mismatch: {detail}"),
            Error::NonFiniteLoss { iteration } => {
                write!(f, "non-finite loss at iteration {iteration}; checkpoint written")
            }
            Error::Config { detail } => write!(f, "config: {detail}"),
            Error::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            Error::Json { source, .. } => Some(source),
            Error::Core(e) => Some(e),
            _ => None,
        }
    }
}

impl From<laneid_core::Error> for Error {
    fn from(e: laneid_core::Error) -> Self {
        Error::Core(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
