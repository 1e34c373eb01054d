use thiserror::Error;

/// Unified error type for the whole library.
///
/// Every fallible operation reports enough context to locate the offending
/// input (operation name, dimension, tensor or parameter name, file path)
/// without needing a debugger.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are inconsistent with what the operation requires.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An argument is outside the operation's domain (bad axis, zero stride,
    /// odd pooling extent, channel count not divisible, ...).
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// Input is structurally valid but degenerate for the requested
    /// computation (zero std, empty body, empty ground truth, ...).
    #[error("{op}: degenerate input: {detail}")]
    DegenerateInput { op: &'static str, detail: String },

    /// A NaN or infinity where only finite values are allowed.
    #[error("{op}: non-finite value: {detail}")]
    NonFinite { op: &'static str, detail: String },

    /// Underlying I/O failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A file does not parse as the format it claims to be.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// A file carries a version tag this build does not understand.
    #[error("unknown format version {found:?} in {path} (supported: {supported})")]
    UnknownVersion {
        path: String,
        found: String,
        supported: &'static str,
    },

    /// Payload byte count disagrees with the header.
    #[error("payload length mismatch in {path}: expected {expected} bytes, found {actual}")]
    PayloadLength {
        path: String,
        expected: u64,
        actual: u64,
    },

    /// Configuration text failed to parse or used an unknown key.
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        Error::DegenerateInput {
            op,
            detail: detail.into(),
        }
    }

    pub fn non_finite(op: &'static str, detail: impl Into<String>) -> Self {
        Error::NonFinite {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
