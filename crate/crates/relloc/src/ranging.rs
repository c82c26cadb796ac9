//! UWB node placement on robots, range prediction between node pairs, and
//! noisy range synthesis for simulation.

use crate::se2::Pose2D;
use crate::{Error, Result, RobotId};
use nalgebra::{DMatrix, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Body-frame positions of the UWB nodes mounted on one robot.
///
/// Node indices are 0-based and stable; they define row/column order in
/// every [`RangeSet`] involving the robot.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeLayout {
    offsets: Vec<Vector2<f64>>,
}

impl NodeLayout {
    pub fn new(offsets: Vec<Vector2<f64>>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::config("layout", "a layout needs at least one node"));
        }
        for (i, o) in offsets.iter().enumerate() {
            if !o.x.is_finite() || !o.y.is_finite() {
                return Err(Error::config(
                    format!("layout.offsets[{i}]"),
                    "offsets must be finite",
                ));
            }
        }
        Ok(Self { offsets })
    }

    /// Four nodes on the corners of a square of the given side length,
    /// centered on the robot origin.
    pub fn square(side: f64) -> Result<Self> {
        if !(side > 0.0) || !side.is_finite() {
            return Err(Error::config("layout.square", "side must be positive"));
        }
        let h = side / 2.0;
        Self::new(vec![
            Vector2::new(h, h),
            Vector2::new(-h, h),
            Vector2::new(-h, -h),
            Vector2::new(h, -h),
        ])
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn offset(&self, index: usize) -> Vector2<f64> {
        self.offsets[index]
    }

    pub fn offsets(&self) -> &[Vector2<f64>] {
        &self.offsets
    }
}

/// One block of node-to-node range measurements between two robots at a
/// single timestamp. Entry `[k][l]` is the range from node `k` on
/// `robot_i` to node `l` on `robot_j`; the mask marks which entries were
/// actually received.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeSet {
    pub robot_i: RobotId,
    pub robot_j: RobotId,
    pub timestamp: f64,
    pub ranges: DMatrix<f64>,
    pub mask: DMatrix<bool>,
}

impl RangeSet {
    pub fn new(
        robot_i: RobotId,
        robot_j: RobotId,
        timestamp: f64,
        ranges: DMatrix<f64>,
        mask: DMatrix<bool>,
    ) -> Result<Self> {
        if ranges.shape() != mask.shape() || ranges.nrows() == 0 || ranges.ncols() == 0 {
            return Err(Error::config("ranges", "range matrix and mask shapes must match and be non-empty"));
        }
        for k in 0..ranges.nrows() {
            for l in 0..ranges.ncols() {
                if mask[(k, l)] && !(ranges[(k, l)] > 0.0 && ranges[(k, l)].is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("range [{k}][{l}] = {}", ranges[(k, l)]),
                    });
                }
            }
        }
        Ok(Self { robot_i, robot_j, timestamp, ranges, mask })
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Iterate valid entries as `(row, col, range)`.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let (rows, cols) = self.ranges.shape();
        (0..rows).flat_map(move |k| {
            (0..cols).filter_map(move |l| {
                self.mask[(k, l)].then(|| (k, l, self.ranges[(k, l)]))
            })
        })
    }

    /// The same measurements viewed from the other robot: rows and
    /// columns swapped, robot ids exchanged.
    pub fn transposed(&self) -> RangeSet {
        RangeSet {
            robot_i: self.robot_j,
            robot_j: self.robot_i,
            timestamp: self.timestamp,
            ranges: self.ranges.transpose(),
            mask: self.mask.transpose(),
        }
    }
}

/// Stochastic model for synthesized UWB ranges: Gaussian noise, an
/// occasional positive non-line-of-sight bias, and dropouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RangeNoiseModel {
    pub sigma_r: f64,
    pub nlos_probability: f64,
    pub nlos_bias_max: f64,
    pub dropout_probability: f64,
}

impl Default for RangeNoiseModel {
    fn default() -> Self {
        Self {
            sigma_r: 0.1,
            nlos_probability: 0.05,
            nlos_bias_max: 0.5,
            dropout_probability: 0.02,
        }
    }
}

impl RangeNoiseModel {
    pub fn noiseless() -> Self {
        Self { sigma_r: 0.0, nlos_probability: 0.0, nlos_bias_max: 0.0, dropout_probability: 0.0 }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let check = |name: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("{field}.{name}"), "out of range"))
            }
        };
        check("sigma_r", self.sigma_r >= 0.0 && self.sigma_r.is_finite())?;
        check("nlos_probability", (0.0..=1.0).contains(&self.nlos_probability))?;
        check("nlos_bias_max", self.nlos_bias_max >= 0.0 && self.nlos_bias_max.is_finite())?;
        check("dropout_probability", (0.0..=1.0).contains(&self.dropout_probability))?;
        Ok(())
    }
}

/// World position of a UWB node given its robot's pose and body offset.
pub fn node_world_position(pose: &Pose2D, offset: Vector2<f64>) -> Vector2<f64> {
    pose.transform_point(offset)
}

/// Distance between node `offset_i` on the reference robot (held at the
/// identity) and node `offset_j` on a robot at `rel_pose`.
pub fn predicted_range(
    rel_pose: &Pose2D,
    offset_i: Vector2<f64>,
    offset_j: Vector2<f64>,
) -> f64 {
    (node_world_position(rel_pose, offset_j) - offset_i).norm()
}

/// Synthesize one noisy range block between two robots.
///
/// Per entry, in a fixed draw order for reproducibility: Gaussian noise,
/// then an NLOS gate with a uniform positive bias, then a dropout gate.
/// Surviving entries are clamped to stay positive.
pub fn synthesize_range_set<R: Rng>(
    pose_i: &Pose2D,
    pose_j: &Pose2D,
    robot_i: RobotId,
    robot_j: RobotId,
    timestamp: f64,
    layout_i: &NodeLayout,
    layout_j: &NodeLayout,
    noise: &RangeNoiseModel,
    rng: &mut R,
) -> RangeSet {
    let rel = pose_i.relative_pose(pose_j);
    let (rows, cols) = (layout_i.len(), layout_j.len());
    let mut ranges = DMatrix::zeros(rows, cols);
    let mut mask = DMatrix::from_element(rows, cols, true);
    let gauss = Normal::new(0.0, noise.sigma_r).expect("validated sigma");
    for k in 0..rows {
        for l in 0..cols {
            let truth = predicted_range(&rel, layout_i.offset(k), layout_j.offset(l));
            let mut r = truth;
            if noise.sigma_r > 0.0 {
                r += gauss.sample(rng);
            }
            if noise.nlos_probability > 0.0 {
                let gate: f64 = rng.random();
                let bias: f64 = rng.random::<f64>() * noise.nlos_bias_max;
                if gate < noise.nlos_probability {
                    r += bias;
                }
            }
            if noise.dropout_probability > 0.0 && rng.random::<f64>() < noise.dropout_probability
            {
                mask[(k, l)] = false;
                ranges[(k, l)] = 0.0;
                continue;
            }
            ranges[(k, l)] = r.max(1e-6);
        }
    }
    RangeSet { robot_i, robot_j, timestamp, ranges, mask }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn node_world_position_cases() {
        let p = node_world_position(&Pose2D::identity(), Vector2::new(0.15, 0.15));
        assert_relative_eq!(p.x, 0.15, epsilon = 1e-12);
        assert_relative_eq!(p.y, 0.15, epsilon = 1e-12);

        let p = node_world_position(&Pose2D::new(2.0, 0.0, 0.0), Vector2::new(-0.15, 0.15));
        assert_relative_eq!(p.x, 1.85, epsilon = 1e-12);
        assert_relative_eq!(p.y, 0.15, epsilon = 1e-12);

        let p = node_world_position(&Pose2D::new(0.0, 0.0, PI / 2.0), Vector2::new(0.15, 0.0));
        assert_relative_eq!(p.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.y, 0.15, epsilon = 1e-12);
    }

    #[test]
    fn predicted_range_cases() {
        let zero = Vector2::zeros();
        assert_relative_eq!(
            predicted_range(&Pose2D::new(2.0, 0.0, 0.0), zero, zero),
            2.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            predicted_range(
                &Pose2D::new(2.0, 0.0, 0.0),
                Vector2::new(0.15, 0.15),
                Vector2::new(-0.15, 0.15)
            ),
            1.7,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            predicted_range(
                &Pose2D::new(0.0, 0.0, PI),
                Vector2::new(0.15, 0.0),
                Vector2::new(0.15, 0.0)
            ),
            0.3,
            epsilon = 1e-12
        );
    }

    #[test]
    fn square_layout_geometry() {
        let layout = NodeLayout::square(0.5).unwrap();
        assert_eq!(layout.len(), 4);
        for o in layout.offsets() {
            assert_relative_eq!(o.x.abs(), 0.25, epsilon = 1e-12);
            assert_relative_eq!(o.y.abs(), 0.25, epsilon = 1e-12);
        }
        assert!(NodeLayout::square(0.0).is_err());
        assert!(NodeLayout::new(vec![]).is_err());
    }

    fn single_node() -> NodeLayout {
        NodeLayout::new(vec![Vector2::zeros()]).unwrap()
    }

    #[test]
    fn synthesize_noise_free_matches_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = synthesize_range_set(
            &Pose2D::identity(),
            &Pose2D::new(2.0, 0.0, 0.0),
            RobotId(1),
            RobotId(2),
            0.0,
            &single_node(),
            &single_node(),
            &RangeNoiseModel::noiseless(),
            &mut rng,
        );
        assert_eq!(set.valid_count(), 1);
        assert_relative_eq!(set.ranges[(0, 0)], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn synthesize_is_reproducible() {
        let layout = NodeLayout::square(0.5).unwrap();
        let noise = RangeNoiseModel::default();
        let make = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            synthesize_range_set(
                &Pose2D::identity(),
                &Pose2D::new(3.0, 1.0, 0.4),
                RobotId(1),
                RobotId(2),
                0.0,
                &layout,
                &layout,
                &noise,
                &mut rng,
            )
        };
        let a = make();
        let b = make();
        assert_eq!(a.ranges, b.ranges);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn nlos_bias_is_non_negative() {
        let noise = RangeNoiseModel {
            sigma_r: 0.0,
            nlos_probability: 1.0,
            nlos_bias_max: 0.5,
            dropout_probability: 0.0,
        };
        let layout = NodeLayout::square(0.5).unwrap();
        let truth_rel = Pose2D::new(2.0, 1.0, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let set = synthesize_range_set(
                &Pose2D::identity(),
                &truth_rel,
                RobotId(1),
                RobotId(2),
                0.0,
                &layout,
                &layout,
                &noise,
                &mut rng,
            );
            for (k, l, r) in set.iter_valid() {
                let truth = predicted_range(&truth_rel, layout.offset(k), layout.offset(l));
                assert!(r >= truth - 1e-12, "bias must never shorten a range");
                assert!(r <= truth + 0.5 + 1e-12);
            }
        }
    }

    fn arb_pose() -> impl Strategy<Value = Pose2D> {
        (-10.0..10.0f64, -10.0..10.0f64, -PI..PI).prop_map(|(x, y, t)| Pose2D::new(x, y, t))
    }

    fn arb_offset() -> impl Strategy<Value = Vector2<f64>> {
        (-0.5..0.5f64, -0.5..0.5f64).prop_map(|(x, y)| Vector2::new(x, y))
    }

    proptest! {
        #[test]
        fn prop_range_symmetry(rel in arb_pose(), a in arb_offset(), b in arb_offset()) {
            let fwd = predicted_range(&rel, a, b);
            let bwd = predicted_range(&rel.inverse(), b, a);
            prop_assert!((fwd - bwd).abs() < 1e-9);
        }

        #[test]
        fn prop_translation_invariance(
            rel in arb_pose(),
            shift in arb_pose(),
            a in arb_offset(),
            b in arb_offset(),
        ) {
            // Moving both robots by the same world transform leaves the
            // relative geometry, and hence every range, unchanged.
            let pose_i = shift;
            let pose_j = shift.compose(&rel);
            let moved = pose_i.relative_pose(&pose_j);
            prop_assert!((predicted_range(&rel, a, b) - predicted_range(&moved, a, b)).abs() < 1e-9);
        }
    }
}
