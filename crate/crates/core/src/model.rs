//! Kinematic chain model: 1-DoF revolute joints in a tree, named keypoints,
//! forward kinematics, analytic position Jacobians, and joint-limit
//! projection.

use nalgebra::{DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3;

/// A revolute joint in the kinematic tree.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    /// Parent joint index, or -1 for joints attached to the base.
    pub parent: i64,
    /// Fixed translation from the parent frame to this joint's origin (m).
    pub offset: [f64; 3],
    /// Rotation axis in the joint's local frame (unit norm).
    pub axis: [f64; 3],
    /// Position limits `[q_min, q_max]` (rad).
    pub limits: [f64; 2],
}

/// A named point rigidly attached to a joint frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    /// Index of the joint the point is attached to.
    pub joint: usize,
    /// Offset from the joint frame (m).
    pub offset: [f64; 3],
}

/// One entry of the left/right mirror map over joints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MirrorEntry {
    pub a: String,
    pub b: String,
    pub sign: f64,
}

/// Kinematic model of the robot: joint tree, keypoint attachments, and the
/// mirror map used by the symmetry operators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobotModel {
    pub joints: Vec<Joint>,
    pub keypoints: Vec<Keypoint>,
    /// Names of keypoints that carry orientation targets during retargeting.
    #[serde(default)]
    pub end_effectors: Vec<String>,
    #[serde(default)]
    pub mirror_map: Vec<MirrorEntry>,
    /// Nominal joint configuration (rad); mid-range when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_pose: Option<Vec<f64>>,
    /// Joint names entering the hip-deviation metric term.
    #[serde(default)]
    pub hip_joints: Vec<String>,
    /// Joint names entering the leg-deviation metric term.
    #[serde(default)]
    pub leg_joints: Vec<String>,
    /// Keypoint names of the feet, in `[left, right]` order.
    #[serde(default)]
    pub foot_keypoints: Vec<String>,
}

/// Position and orientation of a frame in the base frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            position: Vector3::zeros(),
            rotation: Matrix3::identity(),
        }
    }
}

impl RobotModel {
    /// Parse and validate a model from its JSON schema.
    pub fn from_json(text: &str) -> Result<Self> {
        let model: RobotModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn keypoint_count(&self) -> usize {
        self.keypoints.len()
    }

    /// Check the structural invariants: topological parent order, ordered
    /// limits, unit axes, and an involutive mirror map.
    pub fn validate(&self) -> Result<()> {
        if self.joints.is_empty() {
            return Err(Error::validation("model has no joints"));
        }
        for (i, j) in self.joints.iter().enumerate() {
            if j.parent >= i as i64 {
                return Err(Error::validation(format!(
                    "joint {} ({}): parent index {} is not smaller than joint index",
                    i, j.name, j.parent
                )));
            }
            if j.parent < -1 {
                return Err(Error::validation(format!(
                    "joint {}: parent index {} out of range",
                    j.name, j.parent
                )));
            }
            if j.limits[0] > j.limits[1] {
                return Err(Error::validation(format!(
                    "joint {}: q_min > q_max",
                    j.name
                )));
            }
            let norm = Vector3::from(j.axis).norm();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::validation(format!(
                    "joint {}: axis norm {} is not unit",
                    j.name, norm
                )));
            }
            if !j.offset.iter().all(|v| v.is_finite()) {
                return Err(Error::validation(format!(
                    "joint {}: non-finite offset",
                    j.name
                )));
            }
        }
        for k in &self.keypoints {
            if k.joint >= self.joints.len() {
                return Err(Error::validation(format!(
                    "keypoint {}: joint index {} out of range",
                    k.name, k.joint
                )));
            }
        }
        for name in &self.end_effectors {
            if self.keypoint_index(name).is_none() {
                return Err(Error::validation(format!(
                    "end effector {name} is not a keypoint"
                )));
            }
        }
        if let Some(pose) = &self.default_pose {
            if pose.len() != self.joints.len() {
                return Err(Error::validation("default_pose length != joint count"));
            }
        }
        self.validate_mirror_map()?;
        for name in self.hip_joints.iter().chain(&self.leg_joints) {
            if self.joint_index(name).is_none() {
                return Err(Error::validation(format!("unknown joint {name} in group")));
            }
        }
        for name in &self.foot_keypoints {
            if self.keypoint_index(name).is_none() {
                return Err(Error::validation(format!("unknown foot keypoint {name}")));
            }
        }
        Ok(())
    }

    fn validate_mirror_map(&self) -> Result<()> {
        let mut seen = vec![false; self.joints.len()];
        for entry in &self.mirror_map {
            if entry.sign != 1.0 && entry.sign != -1.0 {
                return Err(Error::validation(format!(
                    "mirror entry {}-{}: sign must be +-1",
                    entry.a, entry.b
                )));
            }
            let a = self
                .joint_index(&entry.a)
                .ok_or_else(|| Error::validation(format!("unknown mirror joint {}", entry.a)))?;
            let b = self
                .joint_index(&entry.b)
                .ok_or_else(|| Error::validation(format!("unknown mirror joint {}", entry.b)))?;
            for idx in [a, b] {
                if seen[idx] && a != b {
                    return Err(Error::validation(format!(
                        "joint {} appears in multiple mirror entries",
                        self.joints[idx].name
                    )));
                }
                seen[idx] = true;
            }
        }
        Ok(())
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn keypoint_index(&self, name: &str) -> Option<usize> {
        self.keypoints.iter().position(|k| k.name == name)
    }

    /// Indices (into `keypoints`) of the orientation-target end effectors.
    pub fn end_effector_indices(&self) -> Vec<usize> {
        self.end_effectors
            .iter()
            .filter_map(|n| self.keypoint_index(n))
            .collect()
    }

    /// Nominal configuration: `default_pose` when present, otherwise the
    /// middle of each joint's limit range.
    pub fn default_configuration(&self) -> DVector<f64> {
        match &self.default_pose {
            Some(p) => DVector::from_vec(p.clone()),
            None => DVector::from_iterator(
                self.joints.len(),
                self.joints.iter().map(|j| 0.5 * (j.limits[0] + j.limits[1])),
            ),
        }
    }

    fn check_q(&self, q: &DVector<f64>) -> Result<()> {
        if q.len() != self.joints.len() {
            return Err(Error::invalid(format!(
                "joint vector length {} != joint count {}",
                q.len(),
                self.joints.len()
            )));
        }
        if !q.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite joint angle"));
        }
        Ok(())
    }

    /// World pose of every joint frame (after its own rotation), in index
    /// order.
    pub fn joint_poses(&self, q: &DVector<f64>) -> Result<Vec<Pose>> {
        self.check_q(q)?;
        let mut poses: Vec<Pose> = Vec::with_capacity(self.joints.len());
        for (i, joint) in self.joints.iter().enumerate() {
            let parent = if joint.parent < 0 {
                Pose::identity()
            } else {
                poses[joint.parent as usize].clone()
            };
            let origin = parent.position + parent.rotation * Vector3::from(joint.offset);
            let axis = Vector3::from(joint.axis);
            let rotation = parent.rotation * so3::exp(&(axis * q[i]));
            poses.push(Pose {
                position: origin,
                rotation,
            });
        }
        Ok(poses)
    }

    /// Forward kinematics: base-frame pose of every keypoint.
    pub fn forward_kinematics(&self, q: &DVector<f64>) -> Result<Vec<Pose>> {
        let joint_poses = self.joint_poses(q)?;
        Ok(self
            .keypoints
            .iter()
            .map(|k| {
                let jp = &joint_poses[k.joint];
                Pose {
                    position: jp.position + jp.rotation * Vector3::from(k.offset),
                    rotation: jp.rotation,
                }
            })
            .collect())
    }

    /// True when joint `j` moves keypoint `k`, i.e. `j` is on the chain from
    /// the base to the keypoint's joint.
    pub fn is_ancestor(&self, joint: usize, keypoint: usize) -> bool {
        let mut cur = self.keypoints[keypoint].joint as i64;
        while cur >= 0 {
            if cur as usize == joint {
                return true;
            }
            cur = self.joints[cur as usize].parent;
        }
        false
    }

    /// Analytic 3xn position Jacobian of a keypoint.
    ///
    /// Column `j` is `axis_j x (p_key - p_joint_j)` for joints on the chain
    /// to the keypoint and zero otherwise.
    pub fn position_jacobian(
        &self,
        q: &DVector<f64>,
        keypoint: usize,
    ) -> Result<nalgebra::DMatrix<f64>> {
        if keypoint >= self.keypoints.len() {
            return Err(Error::invalid(format!(
                "keypoint index {keypoint} out of range"
            )));
        }
        let joint_poses = self.joint_poses(q)?;
        Ok(self.position_jacobian_cached(&joint_poses, keypoint))
    }

    /// Position Jacobian reusing already-computed joint poses.
    pub(crate) fn position_jacobian_cached(
        &self,
        joint_poses: &[Pose],
        keypoint: usize,
    ) -> nalgebra::DMatrix<f64> {
        let n = self.joints.len();
        let kp = &self.keypoints[keypoint];
        let jp = &joint_poses[kp.joint];
        let p_key = jp.position + jp.rotation * Vector3::from(kp.offset);

        let mut jac = nalgebra::DMatrix::zeros(3, n);
        let mut cur = kp.joint as i64;
        while cur >= 0 {
            let j = cur as usize;
            let axis_world = joint_poses[j].rotation * Vector3::from(self.joints[j].axis);
            let col = axis_world.cross(&(p_key - joint_poses[j].position));
            jac.set_column(j, &col);
            cur = self.joints[j].parent;
        }
        jac
    }

    /// World rotation axes of every joint, for orientation Jacobians.
    pub(crate) fn world_axes(&self, joint_poses: &[Pose]) -> Vec<Vector3<f64>> {
        self.joints
            .iter()
            .zip(joint_poses)
            .map(|(j, p)| p.rotation * Vector3::from(j.axis))
            .collect()
    }

    /// Component-wise projection of `q` onto the joint limits.
    pub fn clamp_to_limits(&self, q: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            q.len().min(self.joints.len()),
            q.iter()
                .zip(&self.joints)
                .map(|(&v, j)| v.clamp(j.limits[0], j.limits[1])),
        )
    }

    /// True when every component of `q` respects its joint limits.
    pub fn within_limits(&self, q: &DVector<f64>) -> bool {
        q.iter()
            .zip(&self.joints)
            .all(|(&v, j)| v >= j.limits[0] && v <= j.limits[1])
    }
}

/// Lie-algebra orientation error `log(target^-1 * actual)` as a rotation
/// vector; its norm is the geodesic angle between the two rotations.
pub fn orientation_error(actual: &Matrix3<f64>, target: &Matrix3<f64>) -> Result<Vector3<f64>> {
    for (name, r) in [("actual", actual), ("target", target)] {
        if so3::orthonormality_defect(r) > 1e-6 {
            return Err(Error::invalid(format!("{name} rotation is not orthonormal")));
        }
    }
    Ok(so3::log(&(target.transpose() * actual)))
}


#[cfg(test)]
mod tests {
    use super::fixtures::{random_chain, single_revolute_z, two_link_planar};
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent FK oracle: chain 4x4 homogeneous transforms.
    fn fk_homogeneous_oracle(model: &RobotModel, q: &DVector<f64>) -> Vec<Vector3<f64>> {
        use nalgebra::Matrix4;
        let mut transforms: Vec<Matrix4<f64>> = Vec::new();
        for (i, j) in model.joints.iter().enumerate() {
            let parent = if j.parent < 0 {
                Matrix4::identity()
            } else {
                transforms[j.parent as usize]
            };
            let mut trans = Matrix4::identity();
            trans
                .fixed_view_mut::<3, 1>(0, 3)
                .copy_from(&Vector3::from(j.offset));
            let mut rot = Matrix4::identity();
            rot.fixed_view_mut::<3, 3>(0, 0)
                .copy_from(&crate::so3::exp(&(Vector3::from(j.axis) * q[i])));
            transforms.push(parent * trans * rot);
        }
        model
            .keypoints
            .iter()
            .map(|k| {
                let t = transforms[k.joint];
                let p = t * nalgebra::Vector4::new(k.offset[0], k.offset[1], k.offset[2], 1.0);
                Vector3::new(p.x, p.y, p.z)
            })
            .collect()
    }

    #[test]
    fn fk_single_revolute_identity() {
        let model = single_revolute_z();
        let poses = model.forward_kinematics(&DVector::from_vec(vec![0.0])).unwrap();
        assert_relative_eq!(poses[0].position, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn fk_single_revolute_quarter_turn() {
        let model = single_revolute_z();
        let poses = model
            .forward_kinematics(&DVector::from_vec(vec![std::f64::consts::FRAC_PI_2]))
            .unwrap();
        assert_relative_eq!(poses[0].position, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn fk_two_link_matches_homogeneous_oracle() {
        let model = two_link_planar();
        let q = DVector::from_vec(vec![std::f64::consts::FRAC_PI_4; 2]);
        let poses = model.forward_kinematics(&q).unwrap();
        let oracle = fk_homogeneous_oracle(&model, &q);
        assert_relative_eq!(poses[0].position, oracle[0], epsilon = 1e-12);
        // Frozen value from the oracle: cos45 + cos90, sin45 + sin90.
        let c = std::f64::consts::FRAC_1_SQRT_2;
        assert_relative_eq!(poses[0].position, Vector3::new(c, c + 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn fk_random_chains_match_homogeneous_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let n = rng.random_range(3..9);
            let model = random_chain(&mut rng, n);
            let q = DVector::from_fn(n, |_, _| rng.random_range(-1.5..1.5));
            let poses = model.forward_kinematics(&q).unwrap();
            for (pose, oracle) in poses.iter().zip(fk_homogeneous_oracle(&model, &q)) {
                assert!((pose.position - oracle).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn fk_rejects_bad_input() {
        let model = single_revolute_z();
        assert!(model.forward_kinematics(&DVector::from_vec(vec![0.0, 1.0])).is_err());
        assert!(model
            .forward_kinematics(&DVector::from_vec(vec![f64::NAN]))
            .is_err());
    }

    #[test]
    fn jacobian_single_revolute_cross_product() {
        let model = single_revolute_z();
        let jac = model
            .position_jacobian(&DVector::from_vec(vec![0.0]), 0)
            .unwrap();
        assert_relative_eq!(jac[(0, 0)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(jac[(1, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(jac[(2, 0)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn jacobian_non_ancestor_column_is_zero() {
        // Two independent chains off the base: joint 1 does not move
        // keypoint attached to joint 0.
        let model = RobotModel::from_json(
            r#"{
                "joints": [
                    {"name":"a","parent":-1,"offset":[0,0,0],"axis":[0,0,1],"limits":[-3,3]},
                    {"name":"b","parent":-1,"offset":[0.5,0,0],"axis":[0,0,1],"limits":[-3,3]}
                ],
                "keypoints": [{"name":"ka","joint":0,"offset":[1,0,0]}],
                "end_effectors": [],
                "mirror_map": []
            }"#,
        )
        .unwrap();
        let jac = model
            .position_jacobian(&DVector::from_vec(vec![0.3, -0.7]), 0)
            .unwrap();
        assert_eq!(jac.column(1), DMatrix::zeros(3, 1).column(0));
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-6;
        for _ in 0..100 {
            let n = rng.random_range(2..8);
            let model = random_chain(&mut rng, n);
            let q = DVector::from_fn(n, |_, _| rng.random_range(-1.5..1.5));
            for k in 0..model.keypoint_count() {
                let analytic = model.position_jacobian(&q, k).unwrap();
                for j in 0..n {
                    let mut qp = q.clone();
                    qp[j] += h;
                    let mut qm = q.clone();
                    qm[j] -= h;
                    let fp = model.forward_kinematics(&qp).unwrap()[k].position;
                    let fm = model.forward_kinematics(&qm).unwrap()[k].position;
                    let numeric = (fp - fm) / (2.0 * h);
                    let col = Vector3::new(analytic[(0, j)], analytic[(1, j)], analytic[(2, j)]);
                    let denom = (numeric.norm() + col.norm()).max(1e-8);
                    assert!(
                        (numeric - col).norm() / denom < 1e-5,
                        "jacobian mismatch at joint {j}"
                    );
                }
            }
        }
    }

    #[test]
    fn jacobian_index_out_of_range() {
        let model = single_revolute_z();
        assert!(model.position_jacobian(&DVector::from_vec(vec![0.0]), 5).is_err());
    }

    #[test]
    fn orientation_error_identity_and_axis_angle() {
        let id = Matrix3::identity();
        assert_eq!(orientation_error(&id, &id).unwrap(), Vector3::zeros());

        let actual = crate::so3::exp(&Vector3::new(0.0, 0.0, 0.3));
        let err = orientation_error(&actual, &id).unwrap();
        assert_relative_eq!(err, Vector3::new(0.0, 0.0, 0.3), epsilon = 1e-12);
    }

    #[test]
    fn orientation_error_norm_is_geodesic_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let w1 = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let w2 = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let r1 = crate::so3::exp(&w1);
            let r2 = crate::so3::exp(&w2);
            let err = orientation_error(&r1, &r2).unwrap();
            let rel = r2.transpose() * r1;
            let angle = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos();
            assert_relative_eq!(err.norm(), angle, epsilon = 1e-8);
        }
    }

    #[test]
    fn orientation_error_rejects_non_orthonormal() {
        let bad = Matrix3::identity() * 1.01;
        assert!(orientation_error(&bad, &Matrix3::identity()).is_err());
    }

    #[test]
    fn clamp_examples() {
        let model = two_link_planar();
        let inside = DVector::from_vec(vec![0.5, -0.5]);
        assert_eq!(model.clamp_to_limits(&inside), inside);

        let above = DVector::from_vec(vec![3.2 + 1.0, 0.0]);
        let clamped = model.clamp_to_limits(&above);
        assert_eq!(clamped[0], 3.2);
        assert_eq!(clamped[1], 0.0);
    }

    proptest! {
        #[test]
        fn clamp_is_idempotent_and_nonexpansive(
            q0 in -10.0f64..10.0,
            q1 in -10.0f64..10.0,
            p0 in -3.0f64..3.0,
            p1 in -3.0f64..3.0,
        ) {
            let model = two_link_planar();
            let q = DVector::from_vec(vec![q0, q1]);
            let p = DVector::from_vec(vec![p0, p1]);
            let cq = model.clamp_to_limits(&q);
            prop_assert_eq!(model.clamp_to_limits(&cq.clone()), cq.clone());
            // Non-expansive in the max norm.
            let cp = model.clamp_to_limits(&p);
            let dist_before = (&q - &p).amax();
            let dist_after = (&cq - &cp).amax();
            prop_assert!(dist_after <= dist_before + 1e-15);
        }

        #[test]
        fn fk_is_deterministic(q0 in -3.0f64..3.0, q1 in -3.0f64..3.0) {
            let model = two_link_planar();
            let q = DVector::from_vec(vec![q0, q1]);
            let a = model.forward_kinematics(&q).unwrap();
            let b = model.forward_kinematics(&q).unwrap();
            prop_assert_eq!(a[0].position, b[0].position);
            prop_assert_eq!(a[0].rotation, b[0].rotation);
        }
    }

    #[test]
    fn model_schema_rejects_bad_topology() {
        let bad = r#"{
            "joints": [
                {"name":"a","parent":1,"offset":[0,0,0],"axis":[0,0,1],"limits":[-1,1]},
                {"name":"b","parent":-1,"offset":[0,0,0],"axis":[0,0,1],"limits":[-1,1]}
            ],
            "keypoints": [],
            "end_effectors": [],
            "mirror_map": []
        }"#;
        assert!(RobotModel::from_json(bad).is_err());
    }

    #[test]
    fn model_schema_rejects_non_unit_axis() {
        let bad = r#"{
            "joints": [{"name":"a","parent":-1,"offset":[0,0,0],"axis":[0,0,2],"limits":[-1,1]}],
            "keypoints": [],
            "end_effectors": [],
            "mirror_map": []
        }"#;
        assert!(RobotModel::from_json(bad).is_err());
    }
}
