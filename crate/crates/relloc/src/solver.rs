//! Relative pose between two robots from one block of node-to-node
//! ranges, by damped Gauss-Newton (Levenberg-Marquardt) least squares.
//!
//! A square node layout makes the cost surface close to 4-fold symmetric,
//! so a blind local solve can land in the wrong orientation basin. When no
//! initial guess is supplied the solver sweeps a ring of cheap seeds
//! (8 bearings x 4 orientations at the centroid distance), refines the
//! best few, and keeps the lowest-cost converged result.

use crate::ranging::{predicted_range, NodeLayout, RangeSet};
use crate::se2::{wrap_angle, Pose2D};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use std::f64::consts::TAU;

/// Below this predicted distance the range gradient is undefined; the
/// corresponding Jacobian row is zeroed and flagged.
const DEGENERATE_RANGE: f64 = 1e-6;

/// Variance floor for the information matrix, so noise-free data does not
/// produce infinite confidence.
const MIN_RESIDUAL_SIGMA: f64 = 0.01;

/// Solver output: the estimated pose with a Gauss-Newton information
/// matrix and convergence diagnostics.
#[derive(Debug, Clone)]
pub struct PoseEstimate {
    pub pose: Pose2D,
    /// `J^T J / sigma^2` at the solution; symmetric positive semidefinite.
    pub information: Matrix3<f64>,
    pub residual_rms: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Relative cost decrease below which the solve is converged.
    pub cost_tolerance: f64,
    /// Step norm below which the solve is converged.
    pub step_tolerance: f64,
    pub initial_damping: f64,
    /// How many of the sweep seeds are refined when no init is given.
    pub num_restarts: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            cost_tolerance: 1e-9,
            step_tolerance: 1e-10,
            initial_damping: 1e-3,
            num_restarts: 4,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        let ok = self.max_iterations > 0
            && self.cost_tolerance > 0.0
            && self.step_tolerance > 0.0
            && self.initial_damping > 0.0
            && self.num_restarts > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(field, "all solver parameters must be positive"))
        }
    }
}

/// Measured minus predicted range for every valid entry, in row-major
/// mask order.
pub fn range_residuals(
    pose: &Pose2D,
    ranges: &RangeSet,
    layout_i: &NodeLayout,
    layout_j: &NodeLayout,
) -> Result<DVector<f64>> {
    check_dims(ranges, layout_i, layout_j)?;
    let valid = ranges.valid_count();
    if valid == 0 {
        return Err(Error::NoMeasurements);
    }
    let mut res = DVector::zeros(valid);
    for (row, (k, l, r)) in ranges.iter_valid().enumerate() {
        res[row] = r - predicted_range(pose, layout_i.offset(k), layout_j.offset(l));
    }
    Ok(res)
}

/// Analytic Jacobian of [`range_residuals`] with respect to `(x, y, theta)`.
#[derive(Debug, Clone)]
pub struct ResidualJacobian {
    pub matrix: DMatrix<f64>,
    /// Rows zeroed because the predicted range was (numerically) zero.
    pub degenerate_rows: Vec<usize>,
}

pub fn residual_jacobian(
    pose: &Pose2D,
    ranges: &RangeSet,
    layout_i: &NodeLayout,
    layout_j: &NodeLayout,
) -> Result<ResidualJacobian> {
    check_dims(ranges, layout_i, layout_j)?;
    let valid = ranges.valid_count();
    if valid == 0 {
        return Err(Error::NoMeasurements);
    }
    let (s, c) = pose.theta.sin_cos();
    let mut matrix = DMatrix::zeros(valid, 3);
    let mut degenerate_rows = Vec::new();
    for (row, (k, l, _)) in ranges.iter_valid().enumerate() {
        let ci = layout_i.offset(k);
        let cj = layout_j.offset(l);
        let world_j = pose.transform_point(cj);
        let diff = world_j - ci;
        let dist = diff.norm();
        if dist < DEGENERATE_RANGE {
            degenerate_rows.push(row);
            continue;
        }
        let u = diff / dist;
        // d(R(theta) c)/dtheta = [-s -c; c -s] c
        let dtheta_x = -s * cj.x - c * cj.y;
        let dtheta_y = c * cj.x - s * cj.y;
        matrix[(row, 0)] = -u.x;
        matrix[(row, 1)] = -u.y;
        matrix[(row, 2)] = -(u.x * dtheta_x + u.y * dtheta_y);
    }
    Ok(ResidualJacobian { matrix, degenerate_rows })
}

/// Solve for the relative pose that best explains a range block.
///
/// With `init` given, runs a single local solve from it. Otherwise the
/// multi-start sweep described in the module docs is used. Errors when
/// fewer than 3 valid ranges are available; if no start converges the
/// best effort is returned with `converged == false`.
pub fn solve_relative_pose(
    ranges: &RangeSet,
    layout_i: &NodeLayout,
    layout_j: &NodeLayout,
    init: Option<Pose2D>,
    config: &SolverConfig,
) -> Result<PoseEstimate> {
    let valid = ranges.valid_count();
    if valid < 3 {
        return Err(Error::Underdetermined { valid });
    }

    let starts = match init {
        Some(p) => vec![p],
        None => {
            let mut seeds = seed_sweep(ranges);
            seeds.sort_by(|a, b| a.0.total_cmp(&b.0));
            seeds.truncate(config.num_restarts.max(1));
            seeds.into_iter().map(|(_, p)| p).collect()
        }
    };

    let mut best: Option<(f64, PoseEstimate)> = None;
    for start in starts {
        let (cost, est) = refine(start, ranges, layout_i, layout_j, config);
        let better = match &best {
            None => true,
            Some((best_cost, best_est)) => match (est.converged, best_est.converged) {
                (true, false) => true,
                (false, true) => false,
                _ => cost < *best_cost,
            },
        };
        if better {
            best = Some((cost, est));
        }
    }
    let (cost, mut est) = best.expect("at least one start");

    // Information from the Gauss-Newton approximation at the solution,
    // with a variance floor.
    let jac = residual_jacobian(&est.pose, ranges, layout_i, layout_j)?;
    let jtj = jac.matrix.transpose() * &jac.matrix;
    let rms = (cost / valid as f64).sqrt();
    let sigma_sq = rms.max(MIN_RESIDUAL_SIGMA).powi(2);
    est.information = Matrix3::from_iterator(jtj.iter().copied()) / sigma_sq;
    est.residual_rms = rms;
    Ok(est)
}

/// Cheap initial guesses: position on a ring at the centroid distance,
/// 8 bearings x 4 orientations, scored by initial cost.
fn seed_sweep(ranges: &RangeSet) -> Vec<(f64, Pose2D)> {
    let mean_range =
        ranges.iter_valid().map(|(_, _, r)| r).sum::<f64>() / ranges.valid_count() as f64;
    let mut seeds = Vec::with_capacity(32);
    for b in 0..8 {
        let bearing = TAU * b as f64 / 8.0;
        let (sy, cx) = bearing.sin_cos();
        for o in 0..4 {
            let heading = wrap_angle(TAU * o as f64 / 4.0);
            let pose = Pose2D::new(mean_range * cx, mean_range * sy, heading);
            seeds.push((sweep_cost(&pose, ranges), pose));
        }
    }
    seeds
}

/// Residual cost using centroid-to-centroid distances only; good enough
/// to rank seeds without touching the layouts.
fn sweep_cost(pose: &Pose2D, ranges: &RangeSet) -> f64 {
    let center_dist = pose.position().norm();
    ranges.iter_valid().map(|(_, _, r)| (r - center_dist).powi(2)).sum()
}

/// Levenberg-Marquardt refinement from one start. Returns the final cost
/// and the estimate (information left as zeros; filled by the caller).
fn refine(
    start: Pose2D,
    ranges: &RangeSet,
    layout_i: &NodeLayout,
    layout_j: &NodeLayout,
    config: &SolverConfig,
) -> (f64, PoseEstimate) {
    let mut pose = start;
    let mut damping = config.initial_damping;
    let mut cost = cost_at(&pose, ranges, layout_i, layout_j);
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..config.max_iterations {
        iterations += 1;
        let res = range_residuals(&pose, ranges, layout_i, layout_j).expect("validated");
        let jac = residual_jacobian(&pose, ranges, layout_i, layout_j).expect("validated");
        let jtj = jac.matrix.transpose() * &jac.matrix;
        let grad = jac.matrix.transpose() * &res;
        if grad.amax() < 1e-14 {
            converged = true;
            break;
        }

        let mut accepted = false;
        for _ in 0..16 {
            let mut damped = jtj.clone();
            for d in 0..3 {
                damped[(d, d)] += damping;
            }
            let step = match damped.clone().lu().solve(&(-&grad)) {
                Some(s) => s,
                None => {
                    damping *= 10.0;
                    continue;
                }
            };
            let candidate = Pose2D::new(pose.x + step[0], pose.y + step[1], pose.theta + step[2]);
            let new_cost = cost_at(&candidate, ranges, layout_i, layout_j);
            if new_cost <= cost {
                let decrease = cost - new_cost;
                pose = candidate;
                let step_norm = step.norm();
                cost = new_cost;
                damping = (damping / 10.0).max(1e-12);
                accepted = true;
                if decrease < config.cost_tolerance * cost.max(1e-12)
                    || step_norm < config.step_tolerance
                {
                    converged = true;
                }
                break;
            }
            damping *= 10.0;
        }
        if converged || !accepted {
            // A rejected round means the damping blew up without finding
            // a downhill step: we are at (or numerically near) a minimum.
            converged = converged || !accepted;
            break;
        }
    }

    (
        cost,
        PoseEstimate {
            pose,
            information: Matrix3::zeros(),
            residual_rms: 0.0,
            converged,
            iterations,
        },
    )
}

fn cost_at(pose: &Pose2D, ranges: &RangeSet, layout_i: &NodeLayout, layout_j: &NodeLayout) -> f64 {
    range_residuals(pose, ranges, layout_i, layout_j)
        .map(|r| r.norm_squared())
        .unwrap_or(f64::INFINITY)
}

fn check_dims(ranges: &RangeSet, layout_i: &NodeLayout, layout_j: &NodeLayout) -> Result<()> {
    if ranges.ranges.nrows() != layout_i.len() || ranges.ranges.ncols() != layout_j.len() {
        return Err(Error::config(
            "ranges",
            format!(
                "range block is {}x{} but layouts have {} and {} nodes",
                ranges.ranges.nrows(),
                ranges.ranges.ncols(),
                layout_i.len(),
                layout_j.len()
            ),
        ));
    }
    Ok(())
}

/// Gauss-Newton covariance propagated through the pose inverse; used for
/// symmetry checks and for deriving the reverse-direction estimate.
pub fn invert_estimate(est: &PoseEstimate) -> PoseEstimate {
    let inv = est.pose.inverse();
    // T_ji = inv(T_ij): propagate information through the inverse map.
    let (s, c) = est.pose.theta.sin_cos();
    // d inv(T)/dT for T = (x, y, theta), inv(T) = (-R^T t, -theta)
    let j = Matrix3::new(
        -c, -s, -(-s * est.pose.x + c * est.pose.y),
        s, -c, -(-c * est.pose.x - s * est.pose.y),
        0.0, 0.0, -1.0,
    );
    let cov = est
        .information
        .try_inverse()
        .map(|cov| j * cov * j.transpose())
        .and_then(|cov| cov.try_inverse());
    PoseEstimate {
        pose: inv,
        information: cov.unwrap_or(est.information),
        residual_rms: est.residual_rms,
        converged: est.converged,
        iterations: est.iterations,
    }
}

/// Stack a pose as a column vector `(x, y, theta)`.
pub(crate) fn pose_vector(p: &Pose2D) -> Vector3<f64> {
    Vector3::new(p.x, p.y, p.theta)
}
