//! Motion-tracking reward terms and evaluation metrics.
//!
//! [`reward_terms`] evaluates the fifteen tracking/penalty components used to
//! score how well a robot state follows a reference frame; [`motion_quality`]
//! and [`stability`] aggregate rollouts into the two headline metrics, and
//! [`classify_motion`] splits reference motions into Easy/Hard for the
//! training curriculum.

use nalgebra::{DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RobotModel;

/// Everything a single evaluation step knows about the robot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobotState {
    /// Root linear velocity in the body frame (m/s).
    pub root_lin_vel: Vector3<f64>,
    /// Root angular velocity in the body frame (rad/s).
    pub root_ang_vel: Vector3<f64>,
    /// Gravity direction in the body frame; unit norm.
    pub projected_gravity: Vector3<f64>,
    pub joint_pos: DVector<f64>,
    pub joint_vel: DVector<f64>,
    pub joint_acc: DVector<f64>,
    pub joint_torque: DVector<f64>,
    pub prev_action: DVector<f64>,
    pub action: DVector<f64>,
    /// Keypoint positions in the body frame (m).
    pub keypoints: Vec<Vector3<f64>>,
    /// Per-foot contact force magnitude (N).
    pub foot_contact_force: Vec<f64>,
    /// Per-foot horizontal velocity (m/s).
    pub foot_vel_xy: Vec<Vector2<f64>>,
}

impl RobotState {
    /// A resting state with `n` joints and `k` keypoints, tracking nothing.
    pub fn zeros(n: usize, k: usize) -> Self {
        RobotState {
            root_lin_vel: Vector3::zeros(),
            root_ang_vel: Vector3::zeros(),
            projected_gravity: Vector3::new(0.0, 0.0, -1.0),
            joint_pos: DVector::zeros(n),
            joint_vel: DVector::zeros(n),
            joint_acc: DVector::zeros(n),
            joint_torque: DVector::zeros(n),
            prev_action: DVector::zeros(n),
            action: DVector::zeros(n),
            keypoints: vec![Vector3::zeros(); k],
            foot_contact_force: vec![0.0; 2],
            foot_vel_xy: vec![Vector2::zeros(); 2],
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.joint_pos.len();
        for (name, v) in [
            ("joint_vel", &self.joint_vel),
            ("joint_acc", &self.joint_acc),
            ("joint_torque", &self.joint_torque),
            ("prev_action", &self.prev_action),
            ("action", &self.action),
        ] {
            if v.len() != n {
                return Err(Error::invalid(format!("{name} length {} != {n}", v.len())));
            }
        }
        let finite = self.root_lin_vel.iter().all(|v| v.is_finite())
            && self.root_ang_vel.iter().all(|v| v.is_finite())
            && self.projected_gravity.iter().all(|v| v.is_finite())
            && self.joint_pos.iter().all(|v| v.is_finite())
            && self.joint_vel.iter().all(|v| v.is_finite())
            && self.joint_acc.iter().all(|v| v.is_finite())
            && self.joint_torque.iter().all(|v| v.is_finite())
            && self.prev_action.iter().all(|v| v.is_finite())
            && self.action.iter().all(|v| v.is_finite())
            && self.keypoints.iter().all(|p| p.iter().all(|v| v.is_finite()))
            && self.foot_contact_force.iter().all(|v| v.is_finite())
            && self.foot_vel_xy.iter().all(|p| p.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::invalid("robot state contains non-finite values"));
        }
        if (self.projected_gravity.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("projected gravity must be unit norm"));
        }
        if self.foot_contact_force.len() != self.foot_vel_xy.len() {
            return Err(Error::invalid("foot force/velocity length mismatch"));
        }
        Ok(())
    }
}

/// The reference quantities one evaluation step is compared against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceFrame {
    /// Reference keypoint positions in the body frame (m).
    pub keypoints: Vec<Vector3<f64>>,
    pub joint_pos: DVector<f64>,
    /// Unsigned height difference between the reference feet (m).
    pub feet_height_diff: f64,
    /// Current single-stance duration (s).
    pub stance_duration: f64,
}

impl ReferenceFrame {
    pub fn from_state(state: &RobotState) -> Self {
        ReferenceFrame {
            keypoints: state.keypoints.clone(),
            joint_pos: state.joint_pos.clone(),
            feet_height_diff: 0.0,
            stance_duration: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = self.keypoints.iter().all(|p| p.iter().all(|v| v.is_finite()))
            && self.joint_pos.iter().all(|v| v.is_finite())
            && self.feet_height_diff.is_finite()
            && self.stance_duration.is_finite();
        if !finite {
            return Err(Error::invalid("reference frame contains non-finite values"));
        }
        if self.stance_duration < 0.0 {
            return Err(Error::invalid("stance duration must be non-negative"));
        }
        Ok(())
    }
}

/// One weight per reward row; penalties non-positive, tracking positive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricWeights {
    pub z_lin_vel: f64,
    pub xy_ang_vel: f64,
    pub joint_torque: f64,
    pub joint_acc: f64,
    pub action_rate: f64,
    pub energy: f64,
    pub termination: f64,
    pub joint_limit: f64,
    pub orientation: f64,
    pub feet_slide: f64,
    pub hip_deviation: f64,
    pub leg_deviation: f64,
    pub keypoint_tracking: f64,
    pub joint_tracking: f64,
    pub single_stance: f64,
}

impl Default for MetricWeights {
    fn default() -> Self {
        MetricWeights {
            z_lin_vel: -0.2,
            xy_ang_vel: -0.05,
            joint_torque: -2e-6,
            joint_acc: -1e-7,
            action_rate: -0.05,
            energy: -1e-6,
            termination: -200.0,
            joint_limit: -1.0,
            orientation: -10.0,
            feet_slide: -0.1,
            hip_deviation: -0.03,
            leg_deviation: -0.01,
            keypoint_tracking: 1.0,
            joint_tracking: 1.0,
            single_stance: 1.5,
        }
    }
}

impl MetricWeights {
    pub fn validate(&self) -> Result<()> {
        let penalties = [
            self.z_lin_vel,
            self.xy_ang_vel,
            self.joint_torque,
            self.joint_acc,
            self.action_rate,
            self.energy,
            self.termination,
            self.joint_limit,
            self.orientation,
            self.feet_slide,
            self.hip_deviation,
            self.leg_deviation,
        ];
        if penalties.iter().any(|&w| w > 0.0) {
            return Err(Error::validation("penalty weights must be <= 0"));
        }
        let tracking = [
            self.keypoint_tracking,
            self.joint_tracking,
            self.single_stance,
        ];
        if tracking.iter().any(|&w| w <= 0.0) {
            return Err(Error::validation("tracking weights must be > 0"));
        }
        Ok(())
    }
}

/// Static robot quantities the reward terms need beyond the weights.
#[derive(Debug, Clone)]
pub struct RewardModel {
    pub weights: MetricWeights,
    /// Per-joint `[q_min, q_max]`.
    pub joint_limits: Vec<[f64; 2]>,
    /// Default joint configuration the deviation terms pull toward.
    pub default_pose: DVector<f64>,
    pub hip_joints: Vec<usize>,
    pub leg_joints: Vec<usize>,
}

impl RewardModel {
    /// Build from a robot model, with Table-default weights.
    pub fn from_model(model: &RobotModel) -> Self {
        RewardModel {
            weights: MetricWeights::default(),
            joint_limits: model.joints.iter().map(|j| j.limits).collect(),
            default_pose: model.default_configuration(),
            hip_joints: model
                .hip_joints
                .iter()
                .filter_map(|n| model.joint_index(n))
                .collect(),
            leg_joints: model
                .leg_joints
                .iter()
                .filter_map(|n| model.joint_index(n))
                .collect(),
        }
    }
}

/// One evaluated reward row.
#[derive(Debug, Clone, Serialize)]
pub struct TermValue {
    pub name: &'static str,
    /// Value of the row's expression before weighting.
    pub raw: f64,
    /// `weight * raw`.
    pub weighted: f64,
}

/// All reward rows for one step, in table order, plus the weighted total.
#[derive(Debug, Clone, Serialize)]
pub struct RewardBreakdown {
    pub terms: Vec<TermValue>,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn term(&self, name: &str) -> Option<&TermValue> {
        self.terms.iter().find(|t| t.name == name)
    }
}

/// Names of the reward rows in evaluation order.
pub const TERM_NAMES: [&str; 15] = [
    "z_lin_vel",
    "xy_ang_vel",
    "joint_torque",
    "joint_acc",
    "action_rate",
    "energy",
    "termination",
    "joint_limit",
    "orientation",
    "feet_slide",
    "hip_deviation",
    "leg_deviation",
    "keypoint_tracking",
    "joint_tracking",
    "single_stance",
];

/// Contact force above which a foot counts as loaded for the slide penalty.
pub const FOOT_CONTACT_THRESHOLD_N: f64 = 100.0;

/// Evaluate every reward row for one step.
///
/// The feet-slide row is active only where the contact force exceeds 100 N;
/// the stance bonus only when the reference lifts a foot by more than 5 cm
/// and the stance duration lies in [0.1, 0.5] s.
pub fn reward_terms(
    model: &RewardModel,
    state: &RobotState,
    reference: &ReferenceFrame,
    terminated: bool,
) -> Result<RewardBreakdown> {
    state.validate()?;
    reference.validate()?;
    model.weights.validate()?;
    let n = state.joint_pos.len();
    if reference.joint_pos.len() != n {
        return Err(Error::invalid("reference joint dimension mismatch"));
    }
    if reference.keypoints.len() != state.keypoints.len() {
        return Err(Error::invalid("reference keypoint count mismatch"));
    }
    if model.joint_limits.len() != n || model.default_pose.len() != n {
        return Err(Error::invalid("reward model dimension mismatch"));
    }

    let w = &model.weights;
    let mut terms = Vec::with_capacity(15);
    let mut push = |name: &'static str, raw: f64, weight: f64| {
        terms.push(TermValue {
            name,
            raw,
            weighted: weight * raw,
        });
    };

    push("z_lin_vel", state.root_lin_vel.z.powi(2), w.z_lin_vel);
    push(
        "xy_ang_vel",
        state.root_ang_vel.x.powi(2) + state.root_ang_vel.y.powi(2),
        w.xy_ang_vel,
    );
    push(
        "joint_torque",
        state.joint_torque.iter().map(|t| t * t).sum(),
        w.joint_torque,
    );
    push(
        "joint_acc",
        state.joint_acc.iter().map(|a| a * a).sum(),
        w.joint_acc,
    );
    push(
        "action_rate",
        (&state.action - &state.prev_action).norm_squared(),
        w.action_rate,
    );
    push(
        "energy",
        state
            .joint_torque
            .iter()
            .zip(state.joint_vel.iter())
            .map(|(t, v)| (t * v).powi(2))
            .sum(),
        w.energy,
    );
    push("termination", if terminated { 1.0 } else { 0.0 }, w.termination);
    push(
        "joint_limit",
        state
            .joint_pos
            .iter()
            .zip(&model.joint_limits)
            .map(|(&q, lim)| if q < lim[0] || q > lim[1] { 1.0 } else { 0.0 })
            .sum(),
        w.joint_limit,
    );
    // Tilt components of the projected gravity; zero for a level base.
    push(
        "orientation",
        state.projected_gravity.x.powi(2) + state.projected_gravity.y.powi(2),
        w.orientation,
    );
    push(
        "feet_slide",
        state
            .foot_contact_force
            .iter()
            .zip(&state.foot_vel_xy)
            .map(|(&f, v)| {
                if f > FOOT_CONTACT_THRESHOLD_N {
                    v.norm_squared()
                } else {
                    0.0
                }
            })
            .sum(),
        w.feet_slide,
    );
    push(
        "hip_deviation",
        model
            .hip_joints
            .iter()
            .map(|&i| (state.joint_pos[i] - model.default_pose[i]).abs())
            .sum(),
        w.hip_deviation,
    );
    push(
        "leg_deviation",
        model
            .leg_joints
            .iter()
            .map(|&i| (state.joint_pos[i] - model.default_pose[i]).abs())
            .sum(),
        w.leg_deviation,
    );
    push(
        "keypoint_tracking",
        keypoint_kernel(&state.keypoints, &reference.keypoints),
        w.keypoint_tracking,
    );
    push(
        "joint_tracking",
        joint_kernel(&state.joint_pos, &reference.joint_pos),
        w.joint_tracking,
    );
    let stance_active = reference.feet_height_diff > 0.05
        && (0.1..=0.5).contains(&reference.stance_duration);
    push(
        "single_stance",
        if stance_active {
            reference.stance_duration
        } else {
            0.0
        },
        w.single_stance,
    );

    let total = terms.iter().map(|t| t.weighted).sum();
    Ok(RewardBreakdown { terms, total })
}

/// `exp(-||p - p_ref||^2 / 2)` over all keypoints.
pub fn keypoint_kernel(keypoints: &[Vector3<f64>], reference: &[Vector3<f64>]) -> f64 {
    let sq: f64 = keypoints
        .iter()
        .zip(reference)
        .map(|(p, r)| (p - r).norm_squared())
        .sum();
    (-sq / 2.0).exp()
}

/// `exp(-||q - q_ref||^2 / 4)`.
pub fn joint_kernel(joints: &DVector<f64>, reference: &DVector<f64>) -> f64 {
    (-(joints - reference).norm_squared() / 4.0).exp()
}

/// Mean over frames of the equally weighted keypoint and joint tracking
/// kernels; 1.0 exactly when every frame matches its reference.
pub fn motion_quality(rollout: &[(RobotState, ReferenceFrame)]) -> Result<f64> {
    if rollout.is_empty() {
        return Err(Error::invalid("empty rollout"));
    }
    let mut acc = 0.0;
    for (state, reference) in rollout {
        acc += 0.5 * keypoint_kernel(&state.keypoints, &reference.keypoints)
            + 0.5 * joint_kernel(&state.joint_pos, &reference.joint_pos);
    }
    Ok(acc / rollout.len() as f64)
}

/// Default tilt angle (rad) between the projected gravity and body-down
/// beyond which the robot counts as fallen.
pub const DEFAULT_FALL_TILT_RAD: f64 = 0.8;

/// Tilt angle of a projected-gravity vector away from body-down.
pub fn gravity_tilt(projected_gravity: &Vector3<f64>) -> f64 {
    (-projected_gravity.z).clamp(-1.0, 1.0).acos()
}

/// Fraction of `horizon` steps survived before the first fall event.
pub fn stability(rollout: &[RobotState], horizon: usize, fall_tilt_rad: f64) -> f64 {
    assert!(horizon >= 1);
    let mut survived = 0usize;
    for state in rollout.iter().take(horizon) {
        if gravity_tilt(&state.projected_gravity) > fall_tilt_rad {
            break;
        }
        survived += 1;
    }
    survived as f64 / horizon as f64
}

/// Curriculum difficulty label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Hard,
}

/// Default peak keypoint speed (m/s) separating quasi-static motions from
/// agile ones.
pub const DEFAULT_HARD_SPEED_THRESHOLD: f64 = 0.8;

/// Classify a reference motion by its peak per-frame mean keypoint speed,
/// measured on world-frame keypoint trajectories. Strictly above the
/// threshold is Hard.
pub fn classify_motion(
    keypoint_frames: &[Vec<Vector3<f64>>],
    fps: f64,
    speed_threshold: f64,
) -> Result<Difficulty> {
    if keypoint_frames.len() < 2 {
        return Err(Error::invalid("need at least two frames to classify"));
    }
    if !(fps > 0.0) {
        return Err(Error::invalid("fps must be positive"));
    }
    let mut peak: f64 = 0.0;
    for pair in keypoint_frames.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        if prev.len() != cur.len() || prev.is_empty() {
            return Err(Error::invalid("inconsistent keypoint counts"));
        }
        let mean_disp: f64 =
            cur.iter().zip(prev).map(|(a, b)| (a - b).norm()).sum::<f64>() / cur.len() as f64;
        peak = peak.max(mean_disp * fps);
    }
    Ok(if peak > speed_threshold {
        Difficulty::Hard
    } else {
        Difficulty::Easy
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn reward_model(n: usize) -> RewardModel {
        RewardModel {
            weights: MetricWeights::default(),
            joint_limits: vec![[-2.0, 2.0]; n],
            default_pose: DVector::zeros(n),
            hip_joints: vec![0],
            leg_joints: vec![1],
        }
    }

    fn perfect_rest(n: usize, k: usize) -> (RobotState, ReferenceFrame) {
        let state = RobotState::zeros(n, k);
        let reference = ReferenceFrame::from_state(&state);
        (state, reference)
    }

    #[test]
    fn perfect_tracking_fixed_point_totals_two() {
        let (state, reference) = perfect_rest(4, 3);
        let breakdown = reward_terms(&reward_model(4), &state, &reference, false).unwrap();
        for term in &breakdown.terms {
            match term.name {
                "keypoint_tracking" | "joint_tracking" => {
                    assert_relative_eq!(term.raw, 1.0);
                    assert_relative_eq!(term.weighted, 1.0);
                }
                _ => assert_relative_eq!(term.weighted, 0.0),
            }
        }
        assert_relative_eq!(breakdown.total, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn keypoint_error_two_gives_exp_minus_one() {
        let (mut state, reference) = perfect_rest(2, 2);
        // Two keypoints each offset by 1 m: total squared error 2.
        state.keypoints[0].x += 1.0;
        state.keypoints[1].y += 1.0;
        let breakdown = reward_terms(&reward_model(2), &state, &reference, false).unwrap();
        assert_relative_eq!(
            breakdown.term("keypoint_tracking").unwrap().raw,
            (-1.0f64).exp(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn termination_contributes_minus_200() {
        let (state, reference) = perfect_rest(2, 1);
        let breakdown = reward_terms(&reward_model(2), &state, &reference, true).unwrap();
        assert_relative_eq!(breakdown.term("termination").unwrap().weighted, -200.0);
        assert_relative_eq!(breakdown.total, 2.0 - 200.0, epsilon = 1e-12);
    }

    #[test]
    fn every_row_matches_closed_form_on_hand_built_state() {
        let n = 3;
        let mut model = reward_model(n);
        model.default_pose = DVector::from_vec(vec![0.1, -0.2, 0.0]);
        let state = RobotState {
            root_lin_vel: Vector3::new(0.3, -0.1, 0.5),
            root_ang_vel: Vector3::new(0.2, -0.4, 0.6),
            projected_gravity: Vector3::new(0.1, -0.2, -(1.0f64 - 0.05).sqrt()),
            joint_pos: DVector::from_vec(vec![0.5, -2.5, 1.0]),
            joint_vel: DVector::from_vec(vec![1.0, -2.0, 0.5]),
            joint_acc: DVector::from_vec(vec![3.0, 0.0, -1.0]),
            joint_torque: DVector::from_vec(vec![10.0, -5.0, 2.0]),
            prev_action: DVector::from_vec(vec![0.0, 0.1, -0.1]),
            action: DVector::from_vec(vec![0.2, -0.1, 0.1]),
            keypoints: vec![Vector3::new(0.5, 0.0, 0.0), Vector3::new(0.0, 0.5, 0.0)],
            foot_contact_force: vec![150.0, 50.0],
            foot_vel_xy: vec![Vector2::new(0.2, -0.1), Vector2::new(1.0, 1.0)],
        };
        let reference = ReferenceFrame {
            keypoints: vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.0, 0.0, 0.0)],
            joint_pos: DVector::from_vec(vec![0.0, -2.0, 1.0]),
            feet_height_diff: 0.12,
            stance_duration: 0.3,
        };
        let b = reward_terms(&model, &state, &reference, true).unwrap();

        let expect = |name: &str, value: f64| {
            assert_relative_eq!(b.term(name).unwrap().raw, value, epsilon = 1e-9);
        };
        expect("z_lin_vel", 0.25);
        expect("xy_ang_vel", 0.04 + 0.16);
        expect("joint_torque", 100.0 + 25.0 + 4.0);
        expect("joint_acc", 9.0 + 0.0 + 1.0);
        expect("action_rate", 0.04 + 0.04 + 0.04);
        expect("energy", 100.0 + 100.0 + 1.0);
        expect("termination", 1.0);
        expect("joint_limit", 1.0); // only joint 1 is outside [-2, 2]
        expect("orientation", 0.01 + 0.04);
        expect("feet_slide", 0.04 + 0.01); // second foot below 100 N
        expect("hip_deviation", (0.5f64 - 0.1).abs());
        expect("leg_deviation", (-2.5f64 + 0.2).abs());
        expect("keypoint_tracking", (-0.25f64).exp());
        expect("joint_tracking", (-0.5f64 / 4.0).exp());
        expect("single_stance", 0.3);

        // Weighted total is the dot product with the Table weights.
        let manual: f64 = b.terms.iter().map(|t| t.weighted).sum();
        assert_relative_eq!(b.total, manual);
    }

    #[test]
    fn stance_bonus_gates_on_height_and_duration() {
        let (state, mut reference) = perfect_rest(2, 1);
        let model = reward_model(2);
        reference.feet_height_diff = 0.12;
        for (duration, active) in [(0.05, false), (0.1, true), (0.5, true), (0.6, false)] {
            reference.stance_duration = duration;
            let b = reward_terms(&model, &state, &reference, false).unwrap();
            let raw = b.term("single_stance").unwrap().raw;
            assert_eq!(raw > 0.0, active, "duration {duration}");
        }
        reference.feet_height_diff = 0.04;
        reference.stance_duration = 0.3;
        let b = reward_terms(&model, &state, &reference, false).unwrap();
        assert_eq!(b.term("single_stance").unwrap().raw, 0.0);
    }

    #[test]
    fn penalties_weighted_non_positive_and_tracking_in_unit_interval() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let model = reward_model(3);
        for _ in 0..200 {
            let mut state = RobotState::zeros(3, 2);
            state.root_lin_vel = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
            state.root_ang_vel = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
            let tilt: f64 = rng.random_range(0.0..1.2);
            let yaw: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            state.projected_gravity =
                Vector3::new(tilt.sin() * yaw.cos(), tilt.sin() * yaw.sin(), -tilt.cos());
            state.joint_pos = DVector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
            state.joint_vel = DVector::from_fn(3, |_, _| rng.random_range(-5.0..5.0));
            state.joint_acc = DVector::from_fn(3, |_, _| rng.random_range(-50.0..50.0));
            state.joint_torque = DVector::from_fn(3, |_, _| rng.random_range(-30.0..30.0));
            state.action = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            state.keypoints = vec![
                Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            ];
            state.foot_contact_force = vec![rng.random_range(0.0..400.0); 2];
            state.foot_vel_xy = vec![Vector2::new(rng.random_range(-1.0..1.0), 0.0); 2];
            let reference = ReferenceFrame {
                keypoints: vec![Vector3::zeros(); 2],
                joint_pos: DVector::zeros(3),
                feet_height_diff: rng.random_range(0.0..0.2),
                stance_duration: rng.random_range(0.0..0.8),
            };
            let b = reward_terms(&model, &state, &reference, rng.random_bool(0.5)).unwrap();
            for t in &b.terms {
                match t.name {
                    "keypoint_tracking" | "joint_tracking" => {
                        assert!(t.raw > 0.0 && t.raw <= 1.0);
                    }
                    "single_stance" => assert!(t.weighted >= 0.0),
                    _ => assert!(t.weighted <= 0.0, "{} = {}", t.name, t.weighted),
                }
            }
        }
    }

    #[test]
    fn quality_perfect_and_offset_cases() {
        let (state, reference) = perfect_rest(2, 2);
        let rollout = vec![(state.clone(), reference.clone()); 5];
        assert_relative_eq!(motion_quality(&rollout).unwrap(), 1.0);

        // Constant keypoint squared error of 2, zero joint error.
        let mut off = state.clone();
        off.keypoints[0].x += 1.0;
        off.keypoints[1].y += 1.0;
        let rollout = vec![(off, reference); 4];
        let expect = 0.5 * (-1.0f64).exp() + 0.5;
        assert_relative_eq!(motion_quality(&rollout).unwrap(), expect, epsilon = 1e-12);
        assert_relative_eq!(expect, 0.6839397, epsilon = 1e-6);
    }

    #[test]
    fn quality_decreases_with_error_scale() {
        let (state, reference) = perfect_rest(2, 2);
        let mut prev = f64::INFINITY;
        for scale in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let mut s = state.clone();
            s.keypoints[0].x += scale;
            let q = motion_quality(&[(s, reference.clone())]).unwrap();
            assert!(q <= prev);
            prev = q;
        }
    }

    #[test]
    fn quality_rejects_empty_rollout() {
        assert!(motion_quality(&[]).is_err());
    }

    #[test]
    fn stability_cases() {
        let upright = RobotState::zeros(2, 1);
        let mut fallen = upright.clone();
        fallen.projected_gravity = Vector3::new(1.0, 0.0, 0.0);

        let rollout = vec![upright.clone(); 100];
        assert_relative_eq!(stability(&rollout, 100, DEFAULT_FALL_TILT_RAD), 1.0);

        let mut rollout = vec![upright.clone(); 50];
        rollout.extend(vec![fallen; 50]);
        assert_relative_eq!(stability(&rollout, 100, DEFAULT_FALL_TILT_RAD), 0.5);

        // Falls never un-happen: injecting an earlier fall cannot raise it.
        let mut earlier = rollout.clone();
        earlier[20].projected_gravity = Vector3::new(0.0, 1.0, 0.0);
        assert!(
            stability(&earlier, 100, DEFAULT_FALL_TILT_RAD)
                <= stability(&rollout, 100, DEFAULT_FALL_TILT_RAD)
        );
    }

    #[test]
    fn classify_static_vs_translating() {
        let still = vec![vec![Vector3::new(1.0, 0.0, 0.0)]; 10];
        assert_eq!(
            classify_motion(&still, 50.0, DEFAULT_HARD_SPEED_THRESHOLD).unwrap(),
            Difficulty::Easy
        );

        // 3 m/s at 50 fps: 0.06 m per frame.
        let fast: Vec<Vec<Vector3<f64>>> = (0..10)
            .map(|t| vec![Vector3::new(t as f64 * 0.06, 0.0, 0.0)])
            .collect();
        assert_eq!(
            classify_motion(&fast, 50.0, DEFAULT_HARD_SPEED_THRESHOLD).unwrap(),
            Difficulty::Hard
        );
    }

    #[test]
    fn classify_boundary_is_strict() {
        // Exactly the threshold speed stays Easy; strictly above is Hard.
        // Step 0.5 is exactly representable, so the peak speed is exact.
        let at: Vec<Vec<Vector3<f64>>> = (0..5)
            .map(|t| vec![Vector3::new(t as f64 * 0.5, 0.0, 0.0)])
            .collect();
        assert_eq!(classify_motion(&at, 1.0, 0.5).unwrap(), Difficulty::Easy);
        let above: Vec<Vec<Vector3<f64>>> = (0..5)
            .map(|t| vec![Vector3::new(t as f64 * 0.5000001, 0.0, 0.0)])
            .collect();
        assert_eq!(classify_motion(&above, 1.0, 0.5).unwrap(), Difficulty::Hard);
    }

    #[test]
    fn classify_rejects_short_sequences() {
        let one = vec![vec![Vector3::zeros()]];
        assert!(classify_motion(&one, 50.0, 0.8).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (state, mut reference) = perfect_rest(3, 2);
        reference.joint_pos = DVector::zeros(4);
        assert!(reward_terms(&reward_model(3), &state, &reference, false).is_err());
    }

    #[test]
    fn nan_input_is_reported() {
        let (mut state, reference) = perfect_rest(3, 2);
        state.joint_vel[1] = f64::NAN;
        assert!(reward_terms(&reward_model(3), &state, &reference, false).is_err());
    }
}
