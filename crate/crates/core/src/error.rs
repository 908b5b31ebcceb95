use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic {found:?}, expected \"GLAT\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype code {0} (only 0 = f32 is defined)")]
    UnsupportedDtype(u32),

    #[error("unsupported rank {0}: tensors have 1 to 4 dimensions")]
    UnsupportedRank(usize),

    #[error("truncated tensor file: {field} needs {expected} bytes, {available} available")]
    Truncated {
        field: &'static str,
        expected: u64,
        available: u64,
    },

    #[error("{0} trailing bytes after tensor payload")]
    TrailingBytes(u64),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("bundle not found: {0}")]
    BundleNotFound(PathBuf),

    #[error("invalid bundle: {0}")]
    Bundle(String),

    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),

    #[error("window {index}: {source}")]
    Window {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("label map: {0}")]
    Label(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_window(self, index: usize) -> Self {
        Error::Window {
            index,
            source: Box::new(self),
        }
    }

    /// True for failures caused by the environment or the input files rather
    /// than by the computation itself.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Io { .. }
            | Error::BundleNotFound(_)
            | Error::Manifest(_)
            | Error::Bundle(_)
            | Error::Label(_)
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion(_)
            | Error::UnsupportedDtype(_)
            | Error::UnsupportedRank(_)
            | Error::Truncated { .. }
            | Error::TrailingBytes(_) => true,
            Error::Window { source, .. } => source.is_input_error(),
            _ => false,
        }
    }
}
