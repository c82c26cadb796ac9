//! Planar rigid transforms (SE(2)): composition, inversion, relative poses
//! and angle normalization.
//!
//! Every operation keeps headings in the half-open interval `(-pi, pi]`,
//! so angle comparisons and residuals never see a 2*pi jump.

use crate::{Error, Result};
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

/// Wrap a finite angle into `(-pi, pi]`.
///
/// Callers must guarantee a finite input; use [`normalize_angle`] for
/// untrusted values.
pub(crate) fn wrap_angle(theta: f64) -> f64 {
    PI - (PI - theta).rem_euclid(TAU)
}

/// Wrap an angle into `(-pi, pi]`, rejecting NaN and infinities.
pub fn normalize_angle(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::NonFinite { context: format!("angle {theta}") });
    }
    Ok(wrap_angle(theta))
}

/// Smallest signed difference `a - b` on the circle, in `(-pi, pi]`.
pub fn angle_difference(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

/// A robot pose in the plane: position in meters, heading in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2D {
    /// Build a pose, wrapping the heading into `(-pi, pi]`.
    ///
    /// Panics on non-finite input; poses are trusted values, validate
    /// external data before constructing them.
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        assert!(
            x.is_finite() && y.is_finite() && theta.is_finite(),
            "pose fields must be finite, got ({x}, {y}, {theta})"
        );
        Self { x, y, theta: wrap_angle(theta) }
    }

    pub fn identity() -> Self {
        Self { x: 0.0, y: 0.0, theta: 0.0 }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    /// Group composition `self ∘ other`: apply `other` in `self`'s frame.
    pub fn compose(&self, other: &Pose2D) -> Pose2D {
        let (s, c) = self.theta.sin_cos();
        Pose2D {
            x: self.x + c * other.x - s * other.y,
            y: self.y + s * other.x + c * other.y,
            theta: wrap_angle(self.theta + other.theta),
        }
    }

    /// Group inverse: `self.compose(&self.inverse())` is the identity.
    pub fn inverse(&self) -> Pose2D {
        let (s, c) = self.theta.sin_cos();
        Pose2D {
            x: -(c * self.x + s * self.y),
            y: -(-s * self.x + c * self.y),
            theta: wrap_angle(-self.theta),
        }
    }

    /// Pose of `other` expressed in `self`'s frame: `self⁻¹ ∘ other`.
    pub fn relative_pose(&self, other: &Pose2D) -> Pose2D {
        self.inverse().compose(other)
    }

    /// Map a point from this pose's body frame into the world frame.
    pub fn transform_point(&self, p: Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.theta.sin_cos();
        Vector2::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }
}

/// Relative motion reported by odometry over one step, in the robot's
/// own frame at the start of the step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryDelta {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl OdometryDelta {
    pub fn new(dx: f64, dy: f64, dtheta: f64) -> Self {
        assert!(
            dx.is_finite() && dy.is_finite() && dtheta.is_finite(),
            "odometry fields must be finite, got ({dx}, {dy}, {dtheta})"
        );
        Self { dx, dy, dtheta: wrap_angle(dtheta) }
    }

    pub fn identity() -> Self {
        Self { dx: 0.0, dy: 0.0, dtheta: 0.0 }
    }

    /// View the delta as an SE(2) increment.
    pub fn as_pose(&self) -> Pose2D {
        Pose2D { x: self.dx, y: self.dy, theta: self.dtheta }
    }

    /// Distance covered by the step.
    pub fn translation_norm(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}
