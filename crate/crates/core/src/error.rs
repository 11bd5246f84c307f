use std::io;

/// Errors produced while decoding one of the on-disk formats.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated input while reading {0}")]
    Truncated(&'static str),
    #[error("offset table inconsistent: {0}")]
    OffsetInconsistency(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("format error: {0}")]
    Format(#[from] FormatError),
    #[error("lookup out of range: index {index}, size {size}")]
    Lookup { index: usize, size: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("batch error: {0}")]
    Batch(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("extraction error: {0}")]
    Extraction(String),
    /// A NaN or infinity reached a numeric routine.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("packaging error for {resource}: {reason}")]
    Packaging { resource: String, reason: String },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Inside a training loop a non-finite value means the run blew up.
    pub(crate) fn in_training(self, context: &str) -> Self {
        match self {
            Error::NonFinite(m) => Error::Divergence(format!("{context}: {m}")),
            other => other,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence(_) => 3,
            Error::Stage { source, .. } => source.exit_code(),
            Error::InvalidInput(_) | Error::Config(_) => 1,
            _ => 2,
        }
    }
}
