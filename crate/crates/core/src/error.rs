//! Unified error type for the library and the CLI exit-code contract.

use thiserror::Error;

/// Every failure mode the library can produce.
///
/// The CLI maps these onto process exit codes via [`Error::exit_code`]:
/// I/O and parse problems exit 2, contract violations (shape mismatches,
/// fingerprint mismatches, parity failures, ...) exit 3, anything else 1.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands have incompatible shapes for the named operation.
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    /// A value fell outside the mathematical domain of an operation
    /// (zero-norm vector passed to cosine similarity, and the like).
    #[error("domain error: {0}")]
    Domain(String),

    /// An index was out of range.
    #[error("index error: {what} {index} out of range for size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    /// A precondition or invariant stated by the public API was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced a NaN or infinity where a finite value is required.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Training aborted because the loss stopped being finite.
    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: u64 },

    /// An adapter was attached with a vocabulary whose fingerprint does not
    /// match the one it was built against.
    #[error("incompatible vocabulary: adapter fingerprint {expected} does not match {found}")]
    IncompatibleVocabulary { expected: String, found: String },

    /// A model artifact is internally inconsistent with the shared vocabulary
    /// (missing shared token rows, out-of-range indices, ...).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Transfer parity was violated: the probability matrices under two
    /// bindings differ. Reports the first differing entry.
    #[error("transfer parity violation at row {row}, col {col}: {a} != {b}")]
    Parity { row: usize, col: usize, a: f64, b: f64 },

    /// A corpus line could not be decoded as UTF-8.
    #[error("decode error at line {line}: not valid UTF-8")]
    Decode { line: usize },

    /// Underlying I/O failure.
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A JSON artifact failed to parse or serialize.
    #[error("JSON error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Convenience constructor tagging an I/O error with the path it hit.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Convenience constructor tagging a JSON error with the path it hit.
    pub fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI contract:
    /// 0 success, 1 internal error, 2 I/O/parse error, 3 contract violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Json { .. } | Error::Decode { .. } => 2,
            Error::Shape { .. }
            | Error::Domain(_)
            | Error::Index { .. }
            | Error::Contract(_)
            | Error::IncompatibleVocabulary { .. }
            | Error::Integrity(_)
            | Error::Parity { .. } => 3,
            Error::NonFinite { .. } | Error::Divergence { .. } => 1,
        }
    }
}

/// Library-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
