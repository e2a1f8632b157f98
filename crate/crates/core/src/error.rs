use serde::Serialize;
use thiserror::Error;

/// Failure modes shared by every solver in the crate.
#[derive(Debug, Clone, Error, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Error {
    #[error("configuration error: {message}")]
    Config { message: String },

    #[error("domain error: {message}")]
    Domain { message: String },

    #[error("fixed point did not converge after {iterations} iterations (last residual {last:.3e})")]
    Convergence {
        iterations: usize,
        last: f64,
        residuals: Vec<f64>,
        context: String,
    },

    #[error("assumption check failed: {message}")]
    Assumption {
        message: String,
        witness: Option<serde_json::Value>,
    },
}

impl Error {
    pub fn config(message: impl Into<String>) -> Self {
        Error::Config {
            message: message.into(),
        }
    }

    pub fn domain(message: impl Into<String>) -> Self {
        Error::Domain {
            message: message.into(),
        }
    }

    pub fn assumption(message: impl Into<String>) -> Self {
        Error::Assumption {
            message: message.into(),
            witness: None,
        }
    }

    /// Prefix extra context onto the error message, keeping the variant.
    pub fn context(self, ctx: impl AsRef<str>) -> Self {
        let ctx = ctx.as_ref();
        match self {
            Error::Config { message } => Error::Config {
                message: format!("{ctx}: {message}"),
            },
            Error::Domain { message } => Error::Domain {
                message: format!("{ctx}: {message}"),
            },
            Error::Convergence {
                iterations,
                last,
                residuals,
                context,
            } => Error::Convergence {
                iterations,
                last,
                residuals,
                context: if context.is_empty() {
                    ctx.to_string()
                } else {
                    format!("{ctx}: {context}")
                },
            },
            Error::Assumption { message, witness } => Error::Assumption {
                message: format!("{ctx}: {message}"),
                witness,
            },
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or_else(|_| serde_json::json!({ "kind": "unknown" }))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
