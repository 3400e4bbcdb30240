//! Error type shared across the toolkit.

use thiserror::Error;

/// Errors produced by any layer of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands had incompatible shapes.
    #[error("{op}: shape mismatch, left is {lhs_rows}x{lhs_cols}, right is {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// A Cholesky factorization hit a non-positive pivot.
    #[error("matrix is not positive definite (failing pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    /// A contract precondition was violated.
    #[error("{0}")]
    Contract(String),

    /// A simulated trajectory left the numerical safety region.
    #[error("simulation diverged on trajectory {trajectory} at step {step} (|state| > {limit:e})")]
    SimulationDiverged {
        trajectory: usize,
        step: usize,
        limit: f64,
    },

    /// Tabular input failed to parse.
    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: String,
        row: usize,
        column: String,
        message: String,
    },

    /// A checkpoint file was malformed.
    #[error("{path}: corrupt checkpoint at byte {offset}: {message}")]
    CheckpointCorrupt {
        path: String,
        offset: u64,
        message: String,
    },

    /// A checkpoint was written by an incompatible format version.
    #[error("checkpoint format version {found} is not supported (this build reads version {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    /// Training produced a non-finite loss.
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {param_norms}"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        param_norms: String,
    },

    /// Filtering failed at a specific step of a trajectory.
    #[error("filter step {step}: {source}")]
    FilterStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    /// An error tagged with the pipeline phase that produced it.
    #[error("{phase}: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wraps an error with the pipeline phase it occurred in.
    pub fn in_phase(self, phase: &'static str) -> Self {
        Error::Phase {
            phase,
            source: Box::new(self),
        }
    }

    /// Wraps an error with the filter step index it occurred at.
    pub fn at_step(self, step: usize) -> Self {
        Error::FilterStep {
            step,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
