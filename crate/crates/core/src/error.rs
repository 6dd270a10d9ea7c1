use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("value {value} is not within 1e-9 of an integer sum")]
    NonIntegerSum { value: f64 },

    #[error("infeasible allocation at state {state:?}: {reason}")]
    Infeasible { state: Vec<u32>, reason: String },

    #[error("lattice box rejected: {0}")]
    BoxTooSmall(String),

    #[error("{solver} did not converge after {iterations} iterations (last change {last_change:e})")]
    NonConvergence {
        solver: &'static str,
        iterations: usize,
        last_change: f64,
    },

    #[error("policy iteration cycled: value rose from {previous} to {current}")]
    Cycling { previous: f64, current: f64 },

    #[error("tilt multiplier {value} is not strictly positive ({clock} at t = {time})")]
    TiltNonPositive {
        value: f64,
        clock: String,
        time: f64,
    },

    #[error("argument {value} is outside the domain of {function}")]
    Domain { function: &'static str, value: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown output format {0:?}; supported formats: csv, txt")]
    UnknownFormat(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn params(msg: impl Into<String>) -> Self {
        Error::InvalidParams(msg.into())
    }

    pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(Error::Dimension { expected, got })
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownFormat(_) | Error::InvalidParams(_) => 2,
            Error::NonConvergence { .. } | Error::Cycling { .. } => 3,
            Error::Io { .. } => 4,
            _ => 1,
        }
    }
}
