use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("degenerate direction: |wi + wo| = {0:e}")]
    DegenerateDirection(f64),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("non-finite loss at iteration {iter}: {detail}")]
    NonFinite { iter: u64, detail: String },
}

impl Error {
    pub(crate) fn shape(expected: impl core::fmt::Display, actual: impl core::fmt::Display) -> Self {
        use alloc::string::ToString;
        Error::Shape { expected: expected.to_string(), actual: actual.to_string() }
    }
}
