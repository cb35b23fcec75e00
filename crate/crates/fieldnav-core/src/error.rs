//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by world generation, solvers, training, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Scenario generation could not satisfy its constraints within the retry
    /// budget (e.g. clutter placement sealed off the goal on every attempt).
    #[error("scenario generation failed for {kind} seed {seed}: {reason}")]
    Generation {
        kind: &'static str,
        seed: u64,
        reason: String,
    },

    /// No free-space path exists between the requested endpoints.
    #[error("no path between cells ({0}, {1}) and ({2}, {3})")]
    NoPath(usize, usize, usize, usize),

    /// An iterative solver failed to reach its residual tolerance.
    #[error("solver did not converge: residual {residual:.3e} after {iterations} iterations (tol {tol:.1e})")]
    SolverDiverged {
        residual: f64,
        iterations: usize,
        tol: f64,
    },

    /// A numeric quantity became NaN or infinite.
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    /// A query point fell outside the grid.
    #[error("point ({0:.3}, {1:.3}) lies outside the grid")]
    OutOfBounds(f64, f64),

    /// Training diverged or stalled.
    #[error("training failed after {steps} steps: {reason}")]
    Training { steps: usize, reason: String },

    /// A pipeline stage failed; wraps the underlying error with the stage name.
    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    /// File format violation while reading an artifact.
    #[error("parse error in {context}: {reason}")]
    Parse { context: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wraps `self` with the pipeline stage in which it occurred.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Error {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(context: impl Into<String>, reason: impl Into<String>) -> Error {
        Error::Parse {
            context: context.into(),
            reason: reason.into(),
        }
    }
}

/// Extension adding stage context to pipeline results.
pub trait StageContext<T> {
    /// Tags an error with the pipeline stage that produced it.
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
