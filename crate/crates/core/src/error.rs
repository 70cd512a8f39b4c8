use std::path::PathBuf;

use thiserror::Error;

use crate::simulate::ClosedLoopResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown benchmark `{0}` (expected nl2, winged_cone or attitude)")]
    UnknownBenchmark(String),

    #[error("unknown parameter `{param}` for benchmark `{system}`")]
    UnknownParameter { system: String, param: String },

    #[error("Euler-angle singularity: |theta| = {theta} is within 1e-6 of pi/2")]
    Singularity { theta: f64 },

    #[error("Riccati solver failed: {0}")]
    Riccati(String),

    #[error("Hamiltonian minimization did not converge after {iters} iterations (gradient norm {grad_norm:e})")]
    Optimization { iters: usize, grad_norm: f64 },

    #[error("terminal state outside the punctured neighborhood: {0}")]
    Domain(String),

    #[error("backward integration diverged at t = {t} (|x - x_e| = {distance})")]
    Divergence { t: f64, distance: f64 },

    #[error("closed-loop rollout diverged at t = {t}")]
    RolloutDiverged {
        t: f64,
        partial: Box<ClosedLoopResult>,
    },

    #[error("ill-conditioned sensitivity: {0}")]
    Conditioning(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("corrupt dataset: {0}")]
    Corrupt(String),

    #[error("cannot split dataset: {0}")]
    Split(String),

    #[error("training produced a non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}
