use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the library. The message is prefixed with the owning module.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{module}: domain error: {msg}")]
    Domain { module: &'static str, msg: String },

    #[error("{module}: configuration error: {msg}")]
    Config { module: &'static str, msg: String },

    #[error("{module}: numeric error: {msg}")]
    Numeric { module: &'static str, msg: String },

    #[error("{module}: out of range: {msg}")]
    Range { module: &'static str, msg: String },

    #[error("{module}: unsupported: {msg}")]
    Unsupported { module: &'static str, msg: String },

    #[error("kernel: rejected: {0}")]
    KernelRejected(String),

    #[error("resolvent: truncation insufficient: supremum attained at the last mode K={modes} (t={time:e}); increase the number of modes")]
    TruncationInsufficient { modes: usize, time: f64 },

    #[error("solver: Picard iteration did not contract within {iterations} iterations (last distance {last:e}); the weight lambda is likely too small")]
    NonContraction { iterations: usize, last: f64, trace: Vec<f64> },

    #[error("solver: blow-up at step {step} (t={time:e}): a mode exceeded {limit:e}; global existence holds for admissible data, so this indicates a discretization or configuration defect")]
    BlowUp { step: usize, time: f64, limit: f64 },

    #[error("analysis: path {path} (master seed {seed}) failed: {source}")]
    PathFailed {
        seed: u64,
        path: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {} violation(s):\n  {}", .0.len(), .0.join("\n  "))]
    Invalid(Vec<String>),

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn domain(module: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain { module, msg: msg.into() }
    }

    pub(crate) fn config(module: &'static str, msg: impl Into<String>) -> Self {
        Error::Config { module, msg: msg.into() }
    }

    pub(crate) fn numeric(module: &'static str, msg: impl Into<String>) -> Self {
        Error::Numeric { module, msg: msg.into() }
    }

    pub(crate) fn range(module: &'static str, msg: impl Into<String>) -> Self {
        Error::Range { module, msg: msg.into() }
    }

    pub(crate) fn unsupported(module: &'static str, msg: impl Into<String>) -> Self {
        Error::Unsupported { module, msg: msg.into() }
    }

    /// Process exit code: 2 configuration, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Invalid(_) | Error::KernelRejected(_) | Error::Io(_) => 2,
            Error::Domain { .. } | Error::Unsupported { .. } => 2,
            Error::PathFailed { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
