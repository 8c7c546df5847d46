use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("tensor file has bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported tensor file version {0:#04x}")]
    UnsupportedVersion(u8),

    #[error("unsupported tensor dtype {0:#04x}")]
    UnsupportedDtype(u8),

    #[error("tensor header dims {h}x{w}x{c} overflow the addressable size")]
    DimOverflow { h: u32, w: u32, c: u32 },

    #[error("tensor payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("tensor file has {0} trailing bytes after the payload")]
    TrailingBytes(usize),

    #[error("memory is not initialized; the first frame must carry image evidence")]
    Uninitialized,

    #[error("no displacement field supplied for axis {axis} at frame {frame}")]
    MissingField { axis: usize, frame: u64 },

    #[error("flow history needs two fields, has {0}")]
    IncompleteHistory(usize),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("tape mismatch: {0}")]
    Tape(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn dim(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by malformed or missing input data, as opposed
    /// to configuration or numerical failures.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::BadMagic(_)
                | Error::UnsupportedVersion(_)
                | Error::UnsupportedDtype(_)
                | Error::DimOverflow { .. }
                | Error::Truncated { .. }
                | Error::TrailingBytes(_)
                | Error::Io { .. }
                | Error::Parse { .. }
        )
    }
}
