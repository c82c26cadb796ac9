//! Crate-wide error type.

use crate::RobotId;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An angle or other measurement was NaN or infinite.
    #[error("non-finite value: {context}")]
    NonFinite { context: String },

    /// A range set contained no valid measurements.
    #[error("no valid range measurements")]
    NoMeasurements,

    /// Fewer valid ranges than unknowns; the relative pose cannot be solved.
    #[error("underdetermined: {valid} valid ranges, need at least 3")]
    Underdetermined { valid: usize },

    /// A constraint referenced a robot that has no node in the graph.
    #[error("unknown robot {0}")]
    UnknownRobot(RobotId),

    /// The pose graph carries no inter-robot constraints, so no relative
    /// pose is observable.
    #[error("relative poses unobservable: the window holds no inter-robot constraints")]
    Unobservable,

    /// Particle weights summed to zero (or were never normalized).
    #[error("particle weights sum to zero")]
    ZeroWeightSum,

    /// A path specification produced no motion.
    #[error("zero-length path")]
    EmptyPath,

    /// Scenario or pipeline configuration problem, with the offending field.
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    /// Malformed dataset input.
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    /// Streams in a dataset are not aligned on a common tick grid.
    #[error("stream misalignment at tick {tick}: {message}")]
    Misaligned { tick: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    pub(crate) fn parse(line: u64, message: impl Into<String>) -> Self {
        Error::Parse { line, message: message.into() }
    }
}
