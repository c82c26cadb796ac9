//! Relative localization for a group of mobile robots from inter-robot
//! UWB ranging and wheel odometry.
//!
//! The crate is built around a three-stage estimation pipeline:
//!
//! 1. [`solver`] — per-frame relative pose between two robots by nonlinear
//!    least squares over all node-to-node range measurements.
//! 2. [`window`] — sliding-window pose graph that refines the per-frame
//!    estimates with odometry constraints.
//! 3. [`filter`] — per-robot particle filters that fuse odometry with the
//!    refined relative poses for smooth tracking.
//!
//! [`sim`] generates reproducible scenarios (ground truth, noisy odometry,
//! noisy range streams), [`dataset`] reads and writes the CSV interchange
//! format, and [`pipeline`] wires the stages together and scores every
//! estimator variant against ground truth.

pub mod config;
pub mod dataset;
pub mod error;
pub mod filter;
pub mod pipeline;
pub mod ranging;
pub mod se2;
pub mod sim;
pub mod solver;
pub mod window;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

use serde::{Deserialize, Serialize};

/// Identifier for a robot within a scenario.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct RobotId(pub u32);

impl std::fmt::Display for RobotId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Unordered robot pair, stored with the smaller id first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct RobotPair {
    pub first: RobotId,
    pub second: RobotId,
}

impl RobotPair {
    /// Canonical (sorted) pair. Panics if both ids are equal.
    pub fn new(a: RobotId, b: RobotId) -> Self {
        assert!(a != b, "a robot cannot be paired with itself");
        if a < b {
            Self { first: a, second: b }
        } else {
            Self { first: b, second: a }
        }
    }
}

impl std::fmt::Display for RobotPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.first, self.second)
    }
}
