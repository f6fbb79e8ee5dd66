use std::path::{Path, PathBuf};

/// Errors produced anywhere in the library.
///
/// The variants map onto the process exit codes used by the command line
/// front end (see [`Error::exit_code`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("invalid image size {height}x{width}: both sides must be positive multiples of {stride}")]
    ImageSize { height: usize, width: usize, stride: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: parse error at byte offset {offset}: {msg}")]
    Parse { path: PathBuf, offset: u64, msg: String },

    #[error("{path}: unsupported format version {found} (this build reads version {expected})")]
    Version { path: PathBuf, found: u32, expected: u32 },

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code: 2 config, 3 data, 4 divergence, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape { .. } | Error::ImageSize { .. } => 2,
            Error::Data(_) | Error::Parse { .. } | Error::Version { .. } | Error::Json(_) => 3,
            Error::Divergence { .. } | Error::NonFinite(_) => 4,
            Error::Tensor(_) | Error::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Reads an input file. A missing or unreadable input is a data error, not
/// an internal one.
pub(crate) fn read_input(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub(crate) fn read_input_string(path: &Path) -> Result<String> {
    String::from_utf8(read_input(path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
