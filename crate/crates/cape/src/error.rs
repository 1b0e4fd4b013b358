//! Error type shared across the library.

use thiserror::Error;

/// Library-wide error type.
///
/// `Config` and `Schema` map to CLI exit code 2, everything else to 1.
#[derive(Debug, Error)]
pub enum CapeError {
    /// Invalid run configuration (bad value, unknown key, inconsistent sections).
    #[error("config error: {0}")]
    Config(String),

    /// Input file does not match the expected schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Input data violates an invariant (non-monotone timestamps, etc.).
    #[error("data error: {0}")]
    Data(String),

    /// Vector length mismatch between values that must share a dimension.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CapeError>;

impl CapeError {
    /// CLI exit code for this error: 2 for config/schema problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CapeError::Config(_) | CapeError::Schema(_) => 2,
            _ => 1,
        }
    }
}
