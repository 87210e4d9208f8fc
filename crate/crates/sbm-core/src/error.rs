//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration field failed validation. `field` names the offender.
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    /// A field value was negative or non-finite where a density is required.
    #[error("invalid field data at index {index}: {value}")]
    InvalidField { index: usize, value: f64 },

    /// The solver produced a non-finite value; the path is aborted.
    #[error("non-finite value (path {path}, step {step}, cell {cell})")]
    NonFinite { path: u64, step: u64, cell: usize },

    /// A requested snapshot time is not within dt/2 of a step multiple.
    #[error("snapshot time {t} is not aligned with step size {dt}")]
    SnapshotOffGrid { t: f64, dt: f64 },

    /// Ensemble operations need identical snapshot grids.
    #[error("trajectories have mismatched snapshot times")]
    SnapshotMismatch,

    /// A breakpoint must coincide with a grid node.
    #[error("breakpoint {x} does not lie on a grid node")]
    BreakpointOffGrid { x: f64 },

    /// Not enough data to perform the requested estimate.
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig { field, reason: reason.into() }
    }
}
