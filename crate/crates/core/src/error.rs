use std::path::PathBuf;

use thiserror::Error;

use crate::engine::TrajectoryMetrics;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid compression operator: {0}")]
    InvalidOperator(String),

    #[error("invalid configuration for `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("unsupported objective: {0}")]
    UnsupportedObjective(String),

    #[error("topology is disconnected (zeta = 1); the bound is undefined")]
    InfeasibleTopology,

    #[error(
        "insufficient communication: (1+theta)(1-p)^tau2 = {factor} >= 1; increase tau2 or delta"
    )]
    InsufficientCommunication { factor: f64 },

    #[error("cannot compare records: {0}")]
    Comparison(String),

    #[error("run diverged at step {step}")]
    Diverged {
        step: usize,
        metrics: Box<TrajectoryMetrics>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
