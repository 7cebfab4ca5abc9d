use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor dimension did not match what an operation required.
    /// Always names the offending axis so shape bugs are diagnosable.
    #[error("{op}: {axis} mismatch (expected {expected}, got {actual})")]
    Shape {
        op: &'static str,
        axis: &'static str,
        expected: String,
        actual: String,
    },

    #[error("{op}: {what}")]
    InvalidArgument { op: &'static str, what: String },

    #[error("sample {id}: {what}")]
    BadSample { id: String, what: String },

    #[error("checkpoint {path}: {what}")]
    Checkpoint { path: String, what: String },

    #[error("tensor container {path}: {what}")]
    Container { path: String, what: String },

    #[error("conv self-correction strategy requires a head parameter set")]
    MissingSelfCorrHead,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(
        op: &'static str,
        axis: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            op,
            axis,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn invalid(op: &'static str, what: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            what: what.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
