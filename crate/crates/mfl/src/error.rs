//! Error type shared across the crate.
//!
//! Every fallible operation returns [`Result`]. Variants are coarse on
//! purpose: callers match on the *kind* of failure (domain violation,
//! numerical degeneracy, bad configuration, ...) and the message carries
//! the specifics.

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of the operation
    /// (invalid parameter vector, empty sample, non-finite input, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Dimension or shape mismatch between arguments.
    #[error("shape error: {0}")]
    Shape(String),

    /// A particle left the representable range during time stepping.
    #[error("blow-up: non-finite state at step {step}, particle {particle} (try a finer grid or tamer parameters)")]
    BlowUp { step: usize, particle: usize },

    /// Requested operation is not available for this model family.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A linear system was too close to singular to solve reliably.
    /// `det` and `threshold` let the caller report the margin.
    #[error("singular system: det = {det:.6e} below scale-aware threshold {threshold:.6e}{}", note.as_deref().map(|n| format!(" ({n})")).unwrap_or_default())]
    Singular {
        det: f64,
        threshold: f64,
        note: Option<String>,
    },

    /// An experiment-level failure (too many failed replications,
    /// inconsistent report, ...).
    #[error("experiment error: {0}")]
    Experiment(String),

    /// Configuration problems. All issues found in one pass are collected
    /// so the user can fix them together.
    #[error("config error:\n{}", .0.iter().map(|e| format!("  - {e}")).collect::<Vec<_>>().join("\n"))]
    Config(Vec<String>),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Convenience constructor for a single-message config error.
    pub fn config_msg(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }
}

pub type Result<T> = std::result::Result<T, Error>;
