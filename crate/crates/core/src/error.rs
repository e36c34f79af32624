//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI maps them to exit codes:
//! usage errors (1), data/configuration errors (2), numeric failures (3).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// API misuse: calling an operation in a way that is never valid
    /// (e.g. backward on a non-scalar).
    #[error("usage error: {0}")]
    Usage(String),

    /// Tensor shapes incompatible with the requested operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Config-file syntax or unknown-key error, with 1-based line number.
    #[error("config parse error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    /// An operation received an empty collection where at least one
    /// element is required.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Input is structurally valid but degenerate for the requested
    /// computation (e.g. all-empty masks).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A numeric invariant failed (NaN/Inf loss, gradient check failure).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// File header does not start with the expected magic bytes.
    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: String,
        expected: [u8; 4],
        found: [u8; 4],
    },

    /// File ended before the payload declared by its header.
    #[error("truncated file {path}: expected {expected} bytes of payload, found {found}")]
    Truncated {
        path: String,
        expected: usize,
        found: usize,
    },

    /// Payload element type differs from what the caller required.
    #[error("dtype mismatch in {path}: expected {expected}, found {found}")]
    DtypeMismatch {
        path: String,
        expected: &'static str,
        found: String,
    },

    /// Unsupported format version.
    #[error("unsupported version {found} in {path} (supported: {supported})")]
    Version {
        path: String,
        found: u16,
        supported: u16,
    },

    /// I/O failure with the path that caused it.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
