use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user input: configuration, arguments, or preconditions.
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },

    #[error("shape mismatch for {what}: expected {expected:?}, got {got:?}")]
    Shape {
        what: String,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("domain {domain} out of range (K = {k})")]
    Domain { domain: usize, k: usize },

    #[error("non-finite gradient for example {index}")]
    NonFiniteGradient { index: usize },

    #[error("gradient requested for frozen parameters: {0}")]
    Frozen(String),

    #[error("sequence has {got} real tokens, at least 2 are required")]
    TooShort { got: usize },

    #[error("noise multiplier target unreachable: {0}")]
    Calibration(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation-class errors map to CLI exit status 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::Invalid { .. } | Self::Domain { .. } | Self::TooShort { .. } | Self::Json(_)
        )
    }
}
