//! Sliding-window pose graph over the last `w` frames of all robots.
//!
//! Nodes are per-robot per-frame poses; edges are odometry constraints
//! between consecutive frames and inter-robot pose constraints from the
//! range solver. Optimization is damped Gauss-Newton with the oldest
//! in-window pose of the lowest-id robot held fixed (the objective is
//! invariant to a global rigid transform, so one node must be anchored;
//! only relative poses are reported, which makes the anchor choice
//! unobservable downstream).
//!
//! With variables ordered frame-major the normal equations are block
//! tridiagonal (odometry couples adjacent frames, inter-robot edges stay
//! within a frame), so each step is solved by a block Cholesky sweep in
//! O(w) time.

use crate::se2::{wrap_angle, OdometryDelta, Pose2D};
use crate::solver::{pose_vector, PoseEstimate};
use crate::{Error, Result, RobotId, RobotPair};
use nalgebra::{Cholesky, DMatrix, DVector, Matrix3, Vector3};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

/// A frozen (evicted) or live pose-graph node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphNode {
    pub robot: RobotId,
    pub time_index: u64,
    pub pose: Pose2D,
}

/// Inter-robot pose constraint at one frame: the measured pose of
/// `robot_j` in `robot_i`'s frame, with its information matrix.
#[derive(Debug, Clone)]
pub struct PairConstraint {
    pub robot_i: RobotId,
    pub robot_j: RobotId,
    pub measurement: Pose2D,
    pub information: Matrix3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPolicy {
    /// Fix the lowest-id robot's pose at the oldest in-window frame.
    FirstRobotFirstFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    /// Number of frames retained (`w`). Pipeline configs require >= 2;
    /// the degenerate single-frame window is still usable directly.
    pub window_size: usize,
    pub anchor_policy: AnchorPolicy,
    /// Report pair information from the exact Schur-complement marginal
    /// of the newest frame instead of the conservative edge-sum fallback.
    pub exact_marginals: bool,
    pub max_iterations: usize,
    pub objective_tolerance: f64,
    pub step_tolerance: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window_size: 30,
            anchor_policy: AnchorPolicy::FirstRobotFirstFrame,
            exact_marginals: false,
            max_iterations: 50,
            objective_tolerance: 1e-10,
            step_tolerance: 1e-12,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        if self.window_size < 1 {
            return Err(Error::config(format!("{field}.window_size"), "must be >= 1"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config(format!("{field}.max_iterations"), "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Frame {
    time_index: u64,
    nodes: BTreeMap<RobotId, Pose2D>,
    /// Odometry edge from the previous frame into this one, per robot.
    odometry: BTreeMap<RobotId, (OdometryDelta, Matrix3<f64>)>,
    constraints: Vec<PairConstraint>,
}

/// Outcome of one [`SlidingWindow::push_frame`] call.
#[derive(Debug, Clone, Default)]
pub struct PushSummary {
    pub time_index: u64,
    /// Robots whose odometry was missing this frame; their node was
    /// carried over from the previous estimate.
    pub broken_chains: Vec<RobotId>,
    pub evicted_nodes: usize,
}

/// Result of one optimization pass.
#[derive(Debug, Clone)]
pub struct WindowSolution {
    /// Optimized relative pose at the newest frame for every pair that
    /// has at least one constraint in the window. Keyed by the sorted
    /// pair; the measurement maps `first` -> `second`.
    pub estimates: BTreeMap<RobotPair, PoseEstimate>,
    pub objective_before: f64,
    pub objective_after: f64,
    pub iterations: usize,
}

/// Single-writer sliding-window optimizer. `push_frame` and `optimize`
/// must be externally serialized; distinct windows are independent.
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    config: WindowConfig,
    frames: VecDeque<Frame>,
    robots: BTreeSet<RobotId>,
    next_time: u64,
    evicted: Vec<GraphNode>,
}

impl SlidingWindow {
    pub fn new(config: WindowConfig) -> Self {
        Self {
            config,
            frames: VecDeque::new(),
            robots: BTreeSet::new(),
            next_time: 0,
            evicted: Vec::new(),
        }
    }

    pub fn config(&self) -> &WindowConfig {
        &self.config
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn node_count(&self) -> usize {
        self.frames.iter().map(|f| f.nodes.len()).sum()
    }

    pub fn edge_count(&self) -> usize {
        self.frames.iter().map(|f| f.odometry.len() + f.constraints.len()).sum::<usize>()
            - self.frames.front().map_or(0, |f| f.odometry.len())
    }

    /// Estimates frozen out of the window since the last call.
    pub fn drain_evicted(&mut self) -> Vec<GraphNode> {
        std::mem::take(&mut self.evicted)
    }

    /// Current estimate of a robot's newest pose, if present.
    pub fn latest_pose(&self, robot: RobotId) -> Option<Pose2D> {
        self.frames.back().and_then(|f| f.nodes.get(&robot).copied())
    }

    /// Append one synchronized frame: one odometry delta (with its
    /// information) per active robot, plus any inter-robot constraints
    /// observed at this frame.
    ///
    /// New nodes are initialized by composing the previous estimate with
    /// the odometry; robots missing odometry keep their previous pose and
    /// are reported as broken chains. Frames beyond the window size are
    /// evicted together with their edges.
    pub fn push_frame(
        &mut self,
        odometry: &BTreeMap<RobotId, (OdometryDelta, Matrix3<f64>)>,
        constraints: Vec<PairConstraint>,
    ) -> Result<PushSummary> {
        // Validate constraints before mutating anything.
        let mut frame_robots: BTreeSet<RobotId> = self.robots.clone();
        frame_robots.extend(odometry.keys().copied());
        for c in &constraints {
            if c.robot_i == c.robot_j {
                return Err(Error::config("constraint", "self-pair constraint"));
            }
            for r in [c.robot_i, c.robot_j] {
                if !frame_robots.contains(&r) {
                    return Err(Error::UnknownRobot(r));
                }
            }
        }

        let time_index = self.next_time;
        self.next_time += 1;
        let mut summary = PushSummary { time_index, ..PushSummary::default() };

        let mut nodes = BTreeMap::new();
        let mut odom_edges = BTreeMap::new();
        let previous = self.frames.back().map(|f| f.nodes.clone()).unwrap_or_default();

        for &robot in &frame_robots {
            match (previous.get(&robot), odometry.get(&robot)) {
                (Some(prev), Some((delta, info))) => {
                    nodes.insert(robot, prev.compose(&delta.as_pose()));
                    odom_edges.insert(robot, (*delta, *info));
                }
                (Some(prev), None) => {
                    nodes.insert(robot, *prev);
                    summary.broken_chains.push(robot);
                }
                (None, _) => {
                    // First appearance: place via a constraint when one
                    // reaches an already-placed robot, else at identity.
                    nodes.insert(robot, Pose2D::identity());
                }
            }
        }
        seed_new_nodes(&mut nodes, &previous, &constraints);

        self.robots = frame_robots;
        self.frames.push_back(Frame {
            time_index,
            nodes,
            odometry: odom_edges,
            constraints,
        });

        while self.frames.len() > self.config.window_size {
            let old = self.frames.pop_front().expect("non-empty");
            summary.evicted_nodes += old.nodes.len();
            for (robot, pose) in old.nodes {
                self.evicted.push(GraphNode { robot, time_index: old.time_index, pose });
            }
            // Odometry edges into the new oldest frame lost their tail
            // node; drop them.
            if let Some(front) = self.frames.front_mut() {
                front.odometry.clear();
            }
        }
        Ok(summary)
    }

    /// Total weighted squared error of all edges at the current estimates.
    pub fn objective(&self) -> f64 {
        let mut total = 0.0;
        for (f, frame) in self.frames.iter().enumerate() {
            if f > 0 {
                let prev = &self.frames[f - 1];
                for (robot, (delta, info)) in &frame.odometry {
                    if let (Some(a), Some(b)) = (prev.nodes.get(robot), frame.nodes.get(robot)) {
                        let e = between_error(a, b, &delta.as_pose());
                        total += (e.transpose() * info * e)[0];
                    }
                }
            }
            for c in &frame.constraints {
                let a = frame.nodes[&c.robot_i];
                let b = frame.nodes[&c.robot_j];
                let e = between_error(&a, &b, &c.measurement);
                total += (e.transpose() * c.information * e)[0];
            }
        }
        total
    }

    /// Run damped Gauss-Newton on the window and return the optimized
    /// relative pose for every constrained pair at the newest frame.
    pub fn optimize(&mut self) -> Result<WindowSolution> {
        if self.frames.is_empty() {
            return Err(Error::config("window", "optimize called on an empty window"));
        }
        let pairs: BTreeSet<RobotPair> = self
            .frames
            .iter()
            .flat_map(|f| f.constraints.iter())
            .map(|c| RobotPair::new(c.robot_i, c.robot_j))
            .collect();
        if pairs.is_empty() {
            return Err(Error::Unobservable);
        }

        let layout = self.variable_layout();
        let objective_before = self.objective();
        let mut objective = objective_before;
        let mut damping = 1e-8;
        let mut iterations = 0;

        for _ in 0..self.config.max_iterations {
            iterations += 1;
            let (mut diag, upper, grad) = self.assemble(&layout);
            if grad.iter().map(|g| g.amax()).fold(0.0, f64::max) < 1e-12 {
                break;
            }

            let mut progressed = false;
            for _ in 0..16 {
                let mut damped = diag.clone();
                for d in &mut damped {
                    for i in 0..d.nrows() {
                        d[(i, i)] += damping;
                    }
                }
                let factor = match BlockTridiagFactor::new(damped, &upper) {
                    Some(f) => f,
                    None => {
                        damping *= 10.0;
                        continue;
                    }
                };
                let rhs: Vec<DVector<f64>> = grad.iter().map(|g| -g).collect();
                let step = factor.solve(&rhs);
                let candidate = self.apply_step(&layout, &step);
                let new_objective = objective_with(&self.frames, &candidate);
                if new_objective <= objective {
                    let decrease = objective - new_objective;
                    let step_norm: f64 =
                        step.iter().map(|s| s.norm_squared()).sum::<f64>().sqrt();
                    self.store_poses(candidate);
                    objective = new_objective;
                    damping = (damping / 10.0).max(1e-12);
                    progressed = decrease >= self.config.objective_tolerance * objective.max(1e-12)
                        && step_norm >= self.config.step_tolerance;
                    break;
                }
                damping *= 10.0;
            }
            if !progressed {
                break;
            }
            drop(diag.drain(..));
        }

        let estimates = self.pair_estimates(&layout, &pairs, objective)?;
        Ok(WindowSolution {
            estimates,
            objective_before,
            objective_after: objective,
            iterations,
        })
    }

    /// Frame-major variable layout; the anchor node has no variables.
    fn variable_layout(&self) -> VariableLayout {
        let anchor = match self.config.anchor_policy {
            AnchorPolicy::FirstRobotFirstFrame => self
                .frames
                .front()
                .and_then(|f| f.nodes.keys().next().copied())
                .map(|robot| (0usize, robot)),
        };
        let mut blocks = Vec::with_capacity(self.frames.len());
        for (f, frame) in self.frames.iter().enumerate() {
            let mut offsets = BTreeMap::new();
            let mut size = 0;
            for &robot in frame.nodes.keys() {
                if anchor == Some((f, robot)) {
                    continue;
                }
                offsets.insert(robot, size);
                size += 3;
            }
            blocks.push(BlockLayout { offsets, size });
        }
        VariableLayout { blocks, anchor }
    }

    /// Build the block-tridiagonal normal equations at the current
    /// estimates: diagonal blocks, upper couplings, and the gradient.
    fn assemble(
        &self,
        layout: &VariableLayout,
    ) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
        let frame_count = self.frames.len();
        let mut diag: Vec<DMatrix<f64>> = layout
            .blocks
            .iter()
            .map(|b| DMatrix::zeros(b.size, b.size))
            .collect();
        let mut upper: Vec<DMatrix<f64>> = (0..frame_count.saturating_sub(1))
            .map(|f| DMatrix::zeros(layout.blocks[f].size, layout.blocks[f + 1].size))
            .collect();
        let mut grad: Vec<DVector<f64>> =
            layout.blocks.iter().map(|b| DVector::zeros(b.size)).collect();

        let mut add = |frame_a: usize,
                       slot_a: Option<usize>,
                       frame_b: usize,
                       slot_b: Option<usize>,
                       jac_a: &Matrix3<f64>,
                       jac_b: &Matrix3<f64>,
                       info: &Matrix3<f64>,
                       error: &Vector3<f64>,
                       diag: &mut Vec<DMatrix<f64>>,
                       upper: &mut Vec<DMatrix<f64>>,
                       grad: &mut Vec<DVector<f64>>| {
            if let Some(oa) = slot_a {
                add_block(&mut diag[frame_a], oa, oa, &(jac_a.transpose() * info * jac_a));
                add_vec(&mut grad[frame_a], oa, &(jac_a.transpose() * info * error));
            }
            if let Some(ob) = slot_b {
                add_block(&mut diag[frame_b], ob, ob, &(jac_b.transpose() * info * jac_b));
                add_vec(&mut grad[frame_b], ob, &(jac_b.transpose() * info * error));
            }
            if let (Some(oa), Some(ob)) = (slot_a, slot_b) {
                let cross = jac_a.transpose() * info * jac_b;
                if frame_a == frame_b {
                    add_block(&mut diag[frame_a], oa, ob, &cross);
                    add_block(&mut diag[frame_a], ob, oa, &cross.transpose());
                } else {
                    // frame_a == frame_b - 1 by construction
                    add_block(&mut upper[frame_a], oa, ob, &cross);
                }
            }
        };

        for (f, frame) in self.frames.iter().enumerate() {
            if f > 0 {
                let prev = &self.frames[f - 1];
                for (robot, (delta, info)) in &frame.odometry {
                    let (Some(a), Some(b)) = (prev.nodes.get(robot), frame.nodes.get(robot))
                    else {
                        continue;
                    };
                    let (e, ja, jb) = between_linearized(a, b, &delta.as_pose());
                    add(
                        f - 1,
                        layout.slot(f - 1, *robot),
                        f,
                        layout.slot(f, *robot),
                        &ja,
                        &jb,
                        info,
                        &e,
                        &mut diag,
                        &mut upper,
                        &mut grad,
                    );
                }
            }
            for c in &frame.constraints {
                let a = frame.nodes[&c.robot_i];
                let b = frame.nodes[&c.robot_j];
                let (e, ja, jb) = between_linearized(&a, &b, &c.measurement);
                add(
                    f,
                    layout.slot(f, c.robot_i),
                    f,
                    layout.slot(f, c.robot_j),
                    &ja,
                    &jb,
                    &c.information,
                    &e,
                    &mut diag,
                    &mut upper,
                    &mut grad,
                );
            }
        }
        (diag, upper, grad)
    }

    fn apply_step(
        &self,
        layout: &VariableLayout,
        step: &[DVector<f64>],
    ) -> Vec<BTreeMap<RobotId, Pose2D>> {
        self.frames
            .iter()
            .enumerate()
            .map(|(f, frame)| {
                frame
                    .nodes
                    .iter()
                    .map(|(&robot, pose)| {
                        let updated = match layout.slot(f, robot) {
                            Some(off) => {
                                let s = &step[f];
                                Pose2D::new(
                                    pose.x + s[off],
                                    pose.y + s[off + 1],
                                    pose.theta + s[off + 2],
                                )
                            }
                            None => *pose,
                        };
                        (robot, updated)
                    })
                    .collect()
            })
            .collect()
    }

    fn store_poses(&mut self, poses: Vec<BTreeMap<RobotId, Pose2D>>) {
        for (frame, nodes) in self.frames.iter_mut().zip(poses) {
            frame.nodes = nodes;
        }
    }

    fn pair_estimates(
        &self,
        layout: &VariableLayout,
        pairs: &BTreeSet<RobotPair>,
        objective: f64,
    ) -> Result<BTreeMap<RobotPair, PoseEstimate>> {
        let newest = self.frames.back().expect("non-empty");
        let newest_idx = self.frames.len() - 1;
        let edge_count = self.edge_count().max(1);
        let rms = (objective / edge_count as f64).sqrt();

        // Marginal covariance of the newest frame, when requested: the
        // final Schur-complement block of the (undamped) normal equations
        // inverts to exactly that marginal.
        let last_cov = if self.config.exact_marginals {
            let (diag, upper, _) = self.assemble(layout);
            BlockTridiagFactor::new(diag, &upper).map(|f| f.last_block_covariance())
        } else {
            None
        };

        let mut estimates = BTreeMap::new();
        for &pair in pairs {
            let (Some(pi), Some(pj)) = (newest.nodes.get(&pair.first), newest.nodes.get(&pair.second))
            else {
                continue;
            };
            let rel = pi.relative_pose(pj);
            let information = last_cov
                .as_ref()
                .and_then(|cov| {
                    pair_information_from_marginal(cov, layout, newest_idx, pair, pi, pj)
                })
                .unwrap_or_else(|| self.summed_pair_information(pair));
            estimates.insert(
                pair,
                PoseEstimate {
                    pose: rel,
                    information: floor_information(&information),
                    residual_rms: rms,
                    converged: true,
                    iterations: 0,
                },
            );
        }
        if estimates.is_empty() {
            return Err(Error::Unobservable);
        }
        Ok(estimates)
    }

    /// Conservative fallback: sum of the pair's constraint informations
    /// across the window.
    fn summed_pair_information(&self, pair: RobotPair) -> Matrix3<f64> {
        let mut sum = Matrix3::zeros();
        for frame in &self.frames {
            for c in &frame.constraints {
                if RobotPair::new(c.robot_i, c.robot_j) == pair {
                    sum += c.information;
                }
            }
        }
        sum
    }
}

struct BlockLayout {
    offsets: BTreeMap<RobotId, usize>,
    size: usize,
}

struct VariableLayout {
    blocks: Vec<BlockLayout>,
    anchor: Option<(usize, RobotId)>,
}

impl VariableLayout {
    fn slot(&self, frame: usize, robot: RobotId) -> Option<usize> {
        self.blocks[frame].offsets.get(&robot).copied()
    }
}

fn seed_new_nodes(
    nodes: &mut BTreeMap<RobotId, Pose2D>,
    previous: &BTreeMap<RobotId, Pose2D>,
    constraints: &[PairConstraint],
) {
    let mut placed: BTreeSet<RobotId> = previous.keys().copied().collect();
    if placed.is_empty() {
        // Very first frame: the lowest id defines the reference frame.
        if let Some(&first) = nodes.keys().next() {
            placed.insert(first);
        }
    }
    // Propagate placements along constraints until nothing changes.
    loop {
        let mut changed = false;
        for c in constraints {
            if placed.contains(&c.robot_i) && !placed.contains(&c.robot_j) {
                let pose = nodes[&c.robot_i].compose(&c.measurement);
                nodes.insert(c.robot_j, pose);
                placed.insert(c.robot_j);
                changed = true;
            } else if placed.contains(&c.robot_j) && !placed.contains(&c.robot_i) {
                let pose = nodes[&c.robot_j].compose(&c.measurement.inverse());
                nodes.insert(c.robot_i, pose);
                placed.insert(c.robot_i);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
}

/// Error of a between-edge: component-wise difference between the
/// current relative pose and the measurement, angle wrapped.
fn between_error(a: &Pose2D, b: &Pose2D, measurement: &Pose2D) -> Vector3<f64> {
    let rel = a.relative_pose(b);
    let mut e = pose_vector(&rel) - pose_vector(measurement);
    e[2] = wrap_angle(rel.theta - measurement.theta);
    e
}

/// Error plus Jacobians with respect to both endpoint poses.
fn between_linearized(
    a: &Pose2D,
    b: &Pose2D,
    measurement: &Pose2D,
) -> (Vector3<f64>, Matrix3<f64>, Matrix3<f64>) {
    let e = between_error(a, b, measurement);
    let (s, c) = a.theta.sin_cos();
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    // rel.t = R(theta_a)^T (t_b - t_a); derivative of R^T wrt theta.
    let ja = Matrix3::new(
        -c, -s, -s * dx + c * dy,
        s, -c, -c * dx - s * dy,
        0.0, 0.0, -1.0,
    );
    let jb = Matrix3::new(
        c, s, 0.0,
        -s, c, 0.0,
        0.0, 0.0, 1.0,
    );
    (e, ja, jb)
}

fn objective_with(frames: &VecDeque<Frame>, poses: &[BTreeMap<RobotId, Pose2D>]) -> f64 {
    let mut total = 0.0;
    for (f, frame) in frames.iter().enumerate() {
        if f > 0 {
            for (robot, (delta, info)) in &frame.odometry {
                if let (Some(a), Some(b)) = (poses[f - 1].get(robot), poses[f].get(robot)) {
                    let e = between_error(a, b, &delta.as_pose());
                    total += (e.transpose() * info * e)[0];
                }
            }
        }
        for c in &frame.constraints {
            let e = between_error(&poses[f][&c.robot_i], &poses[f][&c.robot_j], &c.measurement);
            total += (e.transpose() * c.information * e)[0];
        }
    }
    total
}

fn add_block(target: &mut DMatrix<f64>, row: usize, col: usize, block: &Matrix3<f64>) {
    for r in 0..3 {
        for c in 0..3 {
            target[(row + r, col + c)] += block[(r, c)];
        }
    }
}

fn add_vec(target: &mut DVector<f64>, offset: usize, v: &Vector3<f64>) {
    for r in 0..3 {
        target[offset + r] += v[r];
    }
}

/// Raise tiny or negative eigenvalues of a symmetric matrix to a floor.
fn floor_information(info: &Matrix3<f64>) -> Matrix3<f64> {
    let sym = (info + info.transpose()) * 0.5;
    let mut eig = sym.symmetric_eigen();
    for v in eig.eigenvalues.iter_mut() {
        if *v < 1e-9 {
            *v = 1e-9;
        }
    }
    eig.recompose()
}

/// Covariance of the relative pose of a pair, from the joint marginal of
/// the newest frame, inverted back to an information matrix.
fn pair_information_from_marginal(
    last_cov: &DMatrix<f64>,
    layout: &VariableLayout,
    newest_frame: usize,
    pair: RobotPair,
    pose_i: &Pose2D,
    pose_j: &Pose2D,
) -> Option<Matrix3<f64>> {
    let oi = layout.slot(newest_frame, pair.first)?;
    let oj = layout.slot(newest_frame, pair.second)?;
    let mut joint = nalgebra::Matrix6::<f64>::zeros();
    for (bi, &src_i) in [oi, oj].iter().enumerate() {
        for (bj, &src_j) in [oi, oj].iter().enumerate() {
            for r in 0..3 {
                for c in 0..3 {
                    joint[(bi * 3 + r, bj * 3 + c)] = last_cov[(src_i + r, src_j + c)];
                }
            }
        }
    }
    let (_, ji, jj) = between_linearized(pose_i, pose_j, &Pose2D::identity());
    let mut g = nalgebra::Matrix3x6::<f64>::zeros();
    g.fixed_view_mut::<3, 3>(0, 0).copy_from(&ji);
    g.fixed_view_mut::<3, 3>(0, 3).copy_from(&jj);
    let cov = g * joint * g.transpose();
    cov.try_inverse()
}

/// Cholesky factorization of a block-tridiagonal SPD matrix, kept as the
/// per-block lower factors and the coupling solves.
struct BlockTridiagFactor {
    lowers: Vec<DMatrix<f64>>,
    couplings: Vec<DMatrix<f64>>,
    last_schur: DMatrix<f64>,
}

impl BlockTridiagFactor {
    fn new(mut diag: Vec<DMatrix<f64>>, upper: &[DMatrix<f64>]) -> Option<Self> {
        let blocks = diag.len();
        let mut lowers = Vec::with_capacity(blocks);
        let mut couplings = Vec::with_capacity(blocks.saturating_sub(1));
        let mut last_schur = DMatrix::zeros(0, 0);
        for f in 0..blocks {
            if f > 0 {
                let w = &couplings[f - 1];
                let correction = w.transpose() * w;
                diag[f] -= correction;
            }
            if f + 1 == blocks {
                last_schur = diag[f].clone();
            }
            let chol = Cholesky::new(diag[f].clone())?;
            let l = chol.l();
            if f + 1 < blocks {
                couplings.push(l.solve_lower_triangular(&upper[f])?);
            }
            lowers.push(l);
        }
        Some(Self { lowers, couplings, last_schur })
    }

    fn solve(&self, rhs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let blocks = self.lowers.len();
        let mut y: Vec<DVector<f64>> = Vec::with_capacity(blocks);
        for f in 0..blocks {
            let mut b = rhs[f].clone();
            if f > 0 {
                b -= self.couplings[f - 1].transpose() * &y[f - 1];
            }
            y.push(self.lowers[f].solve_lower_triangular(&b).expect("factorized"));
        }
        let mut x = vec![DVector::zeros(0); blocks];
        for f in (0..blocks).rev() {
            let mut b = y[f].clone();
            if f + 1 < blocks {
                b -= &self.couplings[f] * &x[f + 1];
            }
            x[f] = self
                .lowers[f]
                .transpose()
                .solve_upper_triangular(&b)
                .expect("factorized");
        }
        x
    }

    /// Inverse of the final Schur complement: the exact marginal
    /// covariance of the last block.
    fn last_block_covariance(&self) -> DMatrix<f64> {
        Cholesky::new(self.last_schur.clone())
            .map(|c| c.inverse())
            .unwrap_or_else(|| DMatrix::zeros(self.last_schur.nrows(), self.last_schur.ncols()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn odom_info() -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(100.0, 100.0, 400.0))
    }

    fn pair_info() -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(50.0, 50.0, 20.0))
    }

    fn constraint(i: u32, j: u32, measurement: Pose2D) -> PairConstraint {
        PairConstraint {
            robot_i: RobotId(i),
            robot_j: RobotId(j),
            measurement,
            information: pair_info(),
        }
    }

    fn odom_map(entries: &[(u32, OdometryDelta)]) -> BTreeMap<RobotId, (OdometryDelta, Matrix3<f64>)> {
        entries.iter().map(|(r, d)| (RobotId(*r), (*d, odom_info()))).collect()
    }

    #[test]
    fn first_frame_construction() {
        let mut w = SlidingWindow::new(WindowConfig::default());
        let odo = odom_map(&[(1, OdometryDelta::identity()), (2, OdometryDelta::identity())]);
        let summary = w
            .push_frame(&odo, vec![constraint(1, 2, Pose2D::new(2.0, 0.0, 0.0))])
            .unwrap();
        assert_eq!(summary.time_index, 0);
        assert_eq!(w.node_count(), 2);
        assert_eq!(w.edge_count(), 1); // no odometry predecessors yet
        assert_eq!(w.latest_pose(RobotId(2)).unwrap(), Pose2D::new(2.0, 0.0, 0.0));
    }

    #[test]
    fn eviction_bounds_node_count() {
        let cfg = WindowConfig { window_size: 10, ..WindowConfig::default() };
        let mut w = SlidingWindow::new(cfg);
        for _ in 0..15 {
            let odo = odom_map(&[
                (1, OdometryDelta::new(0.1, 0.0, 0.0)),
                (2, OdometryDelta::identity()),
            ]);
            w.push_frame(&odo, vec![constraint(1, 2, Pose2D::new(2.0, 0.0, 0.0))]).unwrap();
        }
        assert_eq!(w.frame_count(), 10);
        assert_eq!(w.node_count(), 20);
        assert_eq!(w.drain_evicted().len(), 10);
    }

    #[test]
    fn unknown_robot_constraint_rejected() {
        let mut w = SlidingWindow::new(WindowConfig::default());
        let odo = odom_map(&[(1, OdometryDelta::identity()), (2, OdometryDelta::identity())]);
        let err = w
            .push_frame(&odo, vec![constraint(1, 9, Pose2D::identity())])
            .unwrap_err();
        assert!(matches!(err, Error::UnknownRobot(RobotId(9))));
    }

    #[test]
    fn missing_odometry_breaks_chain() {
        let mut w = SlidingWindow::new(WindowConfig::default());
        let both = odom_map(&[(1, OdometryDelta::identity()), (2, OdometryDelta::identity())]);
        w.push_frame(&both, vec![constraint(1, 2, Pose2D::new(1.0, 0.0, 0.0))]).unwrap();
        let only_one = odom_map(&[(1, OdometryDelta::new(0.1, 0.0, 0.0))]);
        let summary = w.push_frame(&only_one, vec![]).unwrap();
        assert_eq!(summary.broken_chains, vec![RobotId(2)]);
    }

    #[test]
    fn stationary_fixed_point() {
        let mut w = SlidingWindow::new(WindowConfig::default());
        let rel = Pose2D::new(2.0, 1.0, 0.5);
        for _ in 0..10 {
            let odo = odom_map(&[(1, OdometryDelta::identity()), (2, OdometryDelta::identity())]);
            w.push_frame(&odo, vec![constraint(1, 2, rel)]).unwrap();
        }
        let before: Vec<_> = (1..=2).map(|r| w.latest_pose(RobotId(r)).unwrap()).collect();
        let solution = w.optimize().unwrap();
        let after: Vec<_> = (1..=2).map(|r| w.latest_pose(RobotId(r)).unwrap()).collect();
        for (b, a) in before.iter().zip(&after) {
            assert_relative_eq!(b.x, a.x, epsilon = 1e-9);
            assert_relative_eq!(b.y, a.y, epsilon = 1e-9);
        }
        let est = &solution.estimates[&RobotPair::new(RobotId(1), RobotId(2))];
        assert_relative_eq!(est.pose.x, rel.x, epsilon = 1e-9);
        assert!(solution.objective_after <= solution.objective_before + 1e-12);
    }

    #[test]
    fn single_frame_window_returns_measurement() {
        let cfg = WindowConfig { window_size: 1, ..WindowConfig::default() };
        let mut w = SlidingWindow::new(cfg);
        let rel = Pose2D::new(1.5, -0.5, 0.8);
        for step in 0..5 {
            let odo = odom_map(&[
                (1, OdometryDelta::new(0.05 * step as f64, 0.0, 0.01)),
                (2, OdometryDelta::new(0.02, 0.01, 0.0)),
            ]);
            w.push_frame(&odo, vec![constraint(1, 2, rel)]).unwrap();
            let solution = w.optimize().unwrap();
            let est = &solution.estimates[&RobotPair::new(RobotId(1), RobotId(2))];
            assert_relative_eq!(est.pose.x, rel.x, epsilon = 1e-9);
            assert_relative_eq!(est.pose.y, rel.y, epsilon = 1e-9);
            assert_relative_eq!(est.pose.theta, rel.theta, epsilon = 1e-9);
        }
    }

    #[test]
    fn no_inter_robot_edges_is_unobservable() {
        let mut w = SlidingWindow::new(WindowConfig::default());
        for _ in 0..3 {
            let odo = odom_map(&[(1, OdometryDelta::new(0.1, 0.0, 0.0)), (2, OdometryDelta::identity())]);
            w.push_frame(&odo, vec![]).unwrap();
        }
        assert!(matches!(w.optimize(), Err(Error::Unobservable)));
    }

    #[test]
    fn zero_information_constraints_leave_dead_reckoning() {
        let mut w = SlidingWindow::new(WindowConfig::default());
        let zero_info_constraint = |m: Pose2D| PairConstraint {
            robot_i: RobotId(1),
            robot_j: RobotId(2),
            measurement: m,
            information: Matrix3::zeros(),
        };
        let delta = OdometryDelta::new(0.1, 0.0, 0.02);
        let mut expected = Pose2D::identity();
        w.push_frame(
            &odom_map(&[(1, delta), (2, OdometryDelta::identity())]),
            vec![zero_info_constraint(Pose2D::new(5.0, 5.0, 1.0))],
        )
        .unwrap();
        for _ in 0..6 {
            expected = expected.compose(&delta.as_pose());
            w.push_frame(
                &odom_map(&[(1, delta), (2, OdometryDelta::identity())]),
                vec![zero_info_constraint(Pose2D::new(5.0, 5.0, 1.0))],
            )
            .unwrap();
        }
        w.optimize().unwrap();
        let got = w.latest_pose(RobotId(1)).unwrap();
        assert_relative_eq!(got.x, expected.x, epsilon = 1e-9);
        assert_relative_eq!(got.y, expected.y, epsilon = 1e-9);
        assert_relative_eq!(got.theta, expected.theta, epsilon = 1e-9);
    }

    /// Simulate a short two-robot run, returning the window after `n`
    /// frames, with all measurements derived from ground truth plus the
    /// given rigid world offset applied to the initial estimates.
    fn noise_free_window(n: usize, world: Pose2D) -> SlidingWindow {
        let cfg = WindowConfig { window_size: 8, ..WindowConfig::default() };
        let mut w = SlidingWindow::new(cfg);
        let mut gt1 = world.compose(&Pose2D::identity());
        let mut gt2 = world.compose(&Pose2D::new(2.0, 1.0, 0.3));
        let d1 = OdometryDelta::new(0.1, 0.0, 0.05);
        let d2 = OdometryDelta::new(0.08, 0.0, -0.03);
        for step in 0..n {
            if step > 0 {
                gt1 = gt1.compose(&d1.as_pose());
                gt2 = gt2.compose(&d2.as_pose());
            }
            let odo = if step == 0 {
                odom_map(&[(1, OdometryDelta::identity()), (2, OdometryDelta::identity())])
            } else {
                odom_map(&[(1, d1), (2, d2)])
            };
            let rel = gt1.relative_pose(&gt2);
            w.push_frame(&odo, vec![constraint(1, 2, rel)]).unwrap();
        }
        w
    }

    #[test]
    fn noise_free_recovery_and_gauge_invariance() {
        let mut w1 = noise_free_window(12, Pose2D::identity());
        let mut w2 = noise_free_window(12, Pose2D::new(10.0, -4.0, 2.0));
        let s1 = w1.optimize().unwrap();
        let s2 = w2.optimize().unwrap();
        let pair = RobotPair::new(RobotId(1), RobotId(2));
        let a = s1.estimates[&pair].pose;
        let b = s2.estimates[&pair].pose;
        // Same relative estimate regardless of the world frame.
        assert_relative_eq!(a.x, b.x, epsilon = 1e-9);
        assert_relative_eq!(a.y, b.y, epsilon = 1e-9);
        assert!(crate::se2::angle_difference(a.theta, b.theta).abs() < 1e-9);

        // And it matches the ground-truth relative pose that generated
        // the constraints.
        let gt1 = {
            let mut p = Pose2D::identity();
            for _ in 0..11 {
                p = p.compose(&OdometryDelta::new(0.1, 0.0, 0.05).as_pose());
            }
            p
        };
        let gt2 = {
            let mut p = Pose2D::new(2.0, 1.0, 0.3);
            for _ in 0..11 {
                p = p.compose(&OdometryDelta::new(0.08, 0.0, -0.03).as_pose());
            }
            p
        };
        let expected = gt1.relative_pose(&gt2);
        assert_relative_eq!(a.x, expected.x, epsilon = 1e-6);
        assert_relative_eq!(a.y, expected.y, epsilon = 1e-6);
        assert!(crate::se2::angle_difference(a.theta, expected.theta).abs() < 1e-6);
    }

    #[test]
    fn objective_never_increases() {
        // Perturbed constraints so the optimizer has real work to do.
        let mut w = SlidingWindow::new(WindowConfig { window_size: 6, ..WindowConfig::default() });
        let d = OdometryDelta::new(0.1, 0.0, 0.1);
        for step in 0..10 {
            let wobble = 0.15 * ((step * 7919 % 13) as f64 / 13.0 - 0.5);
            let odo = odom_map(&[(1, d), (2, d)]);
            w.push_frame(
                &odo,
                vec![constraint(1, 2, Pose2D::new(2.0 + wobble, 1.0 - wobble, 0.3 + wobble))],
            )
            .unwrap();
            let before = w.objective();
            let solution = w.optimize().unwrap();
            assert!(solution.objective_after <= before + 1e-12);
            assert_relative_eq!(solution.objective_before, before, epsilon = 1e-12);
        }
    }

    #[test]
    fn exact_marginals_produce_spd_information() {
        let mut w = SlidingWindow::new(WindowConfig {
            window_size: 6,
            exact_marginals: true,
            ..WindowConfig::default()
        });
        let d = OdometryDelta::new(0.1, 0.0, 0.0);
        for _ in 0..6 {
            w.push_frame(
                &odom_map(&[(1, d), (2, d)]),
                vec![constraint(1, 2, Pose2D::new(2.0, 0.0, PI / 4.0))],
            )
            .unwrap();
        }
        let solution = w.optimize().unwrap();
        let info = solution.estimates[&RobotPair::new(RobotId(1), RobotId(2))].information;
        let eig = info.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&v| v > 0.0));
    }
}
