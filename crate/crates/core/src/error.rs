use thiserror::Error;

/// Errors raised by the model, math and harness layers.
#[derive(Debug, Error)]
pub enum MgpError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    /// A covariance could not be factorized, or every component assigned zero density.
    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MgpError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        MgpError::InvalidArgument(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        MgpError::NumericalDegeneracy(msg.into())
    }

    pub fn dims(context: impl Into<String>, expected: usize, found: usize) -> Self {
        MgpError::DimensionMismatch {
            context: context.into(),
            expected,
            found,
        }
    }

    /// True for failures caused by the numbers rather than by the caller.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            MgpError::NumericalDegeneracy(_) | MgpError::NonFinite(_)
        )
    }

    /// Prefixes the message with additional context, keeping the error kind.
    pub fn context(self, ctx: &str) -> Self {
        match self {
            MgpError::InvalidArgument(m) => MgpError::InvalidArgument(format!("{ctx}: {m}")),
            MgpError::DimensionMismatch {
                context,
                expected,
                found,
            } => MgpError::DimensionMismatch {
                context: format!("{ctx}: {context}"),
                expected,
                found,
            },
            MgpError::NumericalDegeneracy(m) => {
                MgpError::NumericalDegeneracy(format!("{ctx}: {m}"))
            }
            MgpError::NonFinite(m) => MgpError::NonFinite(format!("{ctx}: {m}")),
            MgpError::Config(m) => MgpError::Config(format!("{ctx}: {m}")),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, MgpError>;
