//! Left/right mirror operators over states and actions, symmetry-based data
//! augmentation, and the mirror-consistency loss.
//!
//! A mirror is a signed pairing: swapped entries pick up a common sign, and
//! unpaired entries are left alone, so applying any mirror twice is exactly
//! the identity in floating point.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ReferenceFrame, RobotState};
use crate::model::RobotModel;

/// A signed index pair: entries `a` and `b` swap and are multiplied by
/// `sign`. `a == b` flips the sign of a single entry.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SignedPair {
    pub a: usize,
    pub b: usize,
    pub sign: f64,
}

impl SignedPair {
    pub fn swap(a: usize, b: usize) -> Self {
        SignedPair { a, b, sign: 1.0 }
    }

    pub fn negate(i: usize) -> Self {
        SignedPair { a: i, b: i, sign: -1.0 }
    }
}

/// Mirror maps for a robot: joint-space pairs for actions and joint vectors,
/// channel pairs for flat observation vectors, and keypoint pairs for
/// structured states.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MirrorSpec {
    pub joint_pairs: Vec<SignedPair>,
    pub state_channels: Vec<SignedPair>,
    #[serde(default)]
    pub keypoint_pairs: Vec<[usize; 2]>,
}

impl MirrorSpec {
    /// Joint-space part from a robot model's mirror map.
    pub fn from_model(model: &RobotModel) -> Result<Self> {
        let mut joint_pairs = Vec::with_capacity(model.mirror_map.len());
        for entry in &model.mirror_map {
            let a = model
                .joint_index(&entry.a)
                .ok_or_else(|| Error::validation(format!("unknown joint {}", entry.a)))?;
            let b = model
                .joint_index(&entry.b)
                .ok_or_else(|| Error::validation(format!("unknown joint {}", entry.b)))?;
            joint_pairs.push(SignedPair { a, b, sign: entry.sign });
        }
        Ok(MirrorSpec {
            joint_pairs,
            state_channels: Vec::new(),
            keypoint_pairs: Vec::new(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: MirrorSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Structural involution check: no index may appear in two pairs and
    /// signs must be +-1.
    pub fn validate(&self) -> Result<()> {
        for (label, pairs) in [("joint", &self.joint_pairs), ("state", &self.state_channels)] {
            let mut seen = std::collections::HashSet::new();
            for p in pairs {
                if p.sign != 1.0 && p.sign != -1.0 {
                    return Err(Error::validation(format!(
                        "{label} pair ({}, {}): sign must be +-1",
                        p.a, p.b
                    )));
                }
                for idx in if p.a == p.b { vec![p.a] } else { vec![p.a, p.b] } {
                    if !seen.insert(idx) {
                        return Err(Error::validation(format!(
                            "{label} index {idx} appears in multiple pairs"
                        )));
                    }
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.keypoint_pairs {
            for &idx in p {
                if p[0] != p[1] && !seen.insert(idx) {
                    return Err(Error::validation(format!(
                        "keypoint index {idx} appears in multiple pairs"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn apply_pairs(v: &DVector<f64>, pairs: &[SignedPair]) -> Result<DVector<f64>> {
    let mut out = v.clone();
    for p in pairs {
        if p.a >= v.len() || p.b >= v.len() {
            return Err(Error::invalid(format!(
                "mirror pair ({}, {}) out of range for length {}",
                p.a,
                p.b,
                v.len()
            )));
        }
        out[p.a] = p.sign * v[p.b];
        out[p.b] = p.sign * v[p.a];
    }
    Ok(out)
}

/// Mirror a flat observation vector through the state-channel map.
pub fn mirror_state(state: &DVector<f64>, spec: &MirrorSpec) -> Result<DVector<f64>> {
    apply_pairs(state, &spec.state_channels)
}

/// Mirror an action (joint-target) vector through the joint map.
pub fn mirror_action(action: &DVector<f64>, spec: &MirrorSpec) -> Result<DVector<f64>> {
    apply_pairs(action, &spec.joint_pairs)
}

/// Mean mirror-consistency error of a policy over a batch of states:
/// `mean ||pi(s) - M(pi(mirror(s)))||^2`. Zero exactly when the policy is
/// mirror-equivariant on the batch.
pub fn symmetry_loss<F>(policy: F, batch: &[DVector<f64>], spec: &MirrorSpec) -> Result<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut acc = 0.0;
    for s in batch {
        let direct = policy(s);
        let mirrored = mirror_action(&policy(&mirror_state(s, spec)?), spec)?;
        acc += (direct - mirrored).norm_squared();
    }
    Ok(acc / batch.len() as f64)
}

/// Double a batch of (state, action) pairs with their mirrored counterparts.
pub fn augment_batch(
    batch: &[(DVector<f64>, DVector<f64>)],
    spec: &MirrorSpec,
) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    let mut out = Vec::with_capacity(batch.len() * 2);
    out.extend_from_slice(batch);
    for (s, a) in batch {
        out.push((mirror_state(s, spec)?, mirror_action(a, spec)?));
    }
    Ok(out)
}

/// Reflect a point through the xz-plane.
fn reflect_y(p: &nalgebra::Vector3<f64>) -> nalgebra::Vector3<f64> {
    nalgebra::Vector3::new(p.x, -p.y, p.z)
}

fn mirror_keypoints(
    points: &[nalgebra::Vector3<f64>],
    pairs: &[[usize; 2]],
) -> Vec<nalgebra::Vector3<f64>> {
    let mut out: Vec<_> = points.iter().map(reflect_y).collect();
    for p in pairs {
        out.swap(p[0], p[1]);
    }
    out
}

/// Mirror a full robot state: left/right keypoints and feet swap with the
/// y-axis reflected; linear quantities flip their y component and angular
/// quantities their x and z components; joint quantities go through the
/// joint map.
pub fn mirror_robot_state(state: &RobotState, spec: &MirrorSpec) -> Result<RobotState> {
    let flip_lin = |v: &nalgebra::Vector3<f64>| nalgebra::Vector3::new(v.x, -v.y, v.z);
    let flip_ang = |v: &nalgebra::Vector3<f64>| nalgebra::Vector3::new(-v.x, v.y, -v.z);
    let mut foot_contact_force = state.foot_contact_force.clone();
    let mut foot_vel_xy: Vec<_> = state
        .foot_vel_xy
        .iter()
        .map(|v| nalgebra::Vector2::new(v.x, -v.y))
        .collect();
    if foot_contact_force.len() == 2 {
        foot_contact_force.swap(0, 1);
        foot_vel_xy.swap(0, 1);
    }
    Ok(RobotState {
        root_lin_vel: flip_lin(&state.root_lin_vel),
        root_ang_vel: flip_ang(&state.root_ang_vel),
        projected_gravity: flip_lin(&state.projected_gravity),
        joint_pos: mirror_action(&state.joint_pos, spec)?,
        joint_vel: mirror_action(&state.joint_vel, spec)?,
        joint_acc: mirror_action(&state.joint_acc, spec)?,
        joint_torque: mirror_action(&state.joint_torque, spec)?,
        prev_action: mirror_action(&state.prev_action, spec)?,
        action: mirror_action(&state.action, spec)?,
        keypoints: mirror_keypoints(&state.keypoints, &spec.keypoint_pairs),
        foot_contact_force,
        foot_vel_xy,
    })
}

/// Mirror a reference frame consistently with [`mirror_robot_state`].
pub fn mirror_reference(reference: &ReferenceFrame, spec: &MirrorSpec) -> Result<ReferenceFrame> {
    Ok(ReferenceFrame {
        keypoints: mirror_keypoints(&reference.keypoints, &spec.keypoint_pairs),
        joint_pos: mirror_action(&reference.joint_pos, spec)?,
        feet_height_diff: reference.feet_height_diff,
        stance_duration: reference.stance_duration,
    })
}
