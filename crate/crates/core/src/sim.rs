//! Toy closed-loop robot environment.
//!
//! The plant is a joint-space PD-tracked surrogate: commanded joint targets
//! pass through a first-order actuator lag, joints integrate
//! `acc = (kp (target - q) - kd qd - damping qd) / inertia + disturbance`
//! with semi-implicit Euler at 50 Hz. The base follows a commanded planar
//! velocity kinematically; interval pushes kick the base velocity and tilt,
//! and a damped second-order tilt state stands in for balance. Domain
//! randomization rows follow the Reset/Startup/Interval split; physical
//! quantities with no surrogate analog (friction, restitution, masses,
//! armature) map onto disturbance magnitude and effective inertia, so what
//! varies and when is preserved even though the plant is not a contact
//! simulation.

use nalgebra::{DVector, Matrix3, Vector2, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::RobotState;
use crate::model::RobotModel;
use crate::so3;

/// Control period: 50 Hz.
pub const DT: f64 = 0.02;

/// Restoring stiffness and damping of the toy tilt state.
const TILT_STIFFNESS: f64 = 60.0;
const TILT_DAMPING: f64 = 10.0;
/// Push velocity decay time constant (s).
const PUSH_DECAY_TAU: f64 = 0.8;
/// Yaw inertia used to map base-torque draws onto a yaw-rate bias.
const BASE_YAW_INERTIA: f64 = 25.0;
/// Fraction of a push velocity kick transferred into tilt rate.
const PUSH_TILT_COUPLING: f64 = 0.4;
/// Nominal per-foot contact force when standing (N).
const FOOT_FORCE_N: f64 = 250.0;

/// Uniform per-joint PD plant parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DynamicsParams {
    pub kp: f64,
    pub kd: f64,
    pub joint_damping: f64,
    /// Actuator lag time constant (s).
    pub lag_time_constant: f64,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        // kd^2 = 4 kp: critically damped tracking.
        DynamicsParams {
            kp: 400.0,
            kd: 40.0,
            joint_damping: 2.0,
            lag_time_constant: 0.05,
        }
    }
}

impl DynamicsParams {
    pub fn validate(&self) -> Result<()> {
        if self.kp < 0.0 || self.kd < 0.0 || self.joint_damping < 0.0 {
            return Err(Error::validation("gains must be non-negative"));
        }
        if !(self.lag_time_constant > 0.0) {
            return Err(Error::validation("lag time constant must be positive"));
        }
        Ok(())
    }
}

/// When a randomization row is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RandMode {
    /// Sampled on every reset.
    Reset,
    /// Sampled once per environment lifetime.
    Startup,
    /// Applied periodically during simulation.
    Interval,
}

/// One randomization row: a named parameter, its range, and (for interval
/// rows) the period range in seconds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomizationRow {
    pub mode: RandMode,
    pub parameter: String,
    pub range: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<[f64; 2]>,
}

/// The full randomization table.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RandomizationConfig {
    pub rows: Vec<RandomizationRow>,
}

impl RandomizationConfig {
    /// No randomization: the unperturbed plant.
    pub fn none() -> Self {
        RandomizationConfig { rows: Vec::new() }
    }

    /// Default table: initial velocities, joint-position scaling, surrogate
    /// friction/restitution/mass/armature rows, default-pose offsets, base
    /// torque, and periodic pushes.
    pub fn defaults() -> Self {
        let row = |mode, parameter: &str, range| RandomizationRow {
            mode,
            parameter: parameter.into(),
            range,
            period: None,
        };
        RandomizationConfig {
            rows: vec![
                row(RandMode::Reset, "init_lin_vel", [-0.5, 0.5]),
                row(RandMode::Reset, "init_ang_vel", [-0.5, 0.5]),
                row(RandMode::Reset, "joint_positions", [0.5, 1.5]),
                row(RandMode::Reset, "joint_velocities", [0.0, 0.0]),
                row(RandMode::Startup, "friction_static", [0.2, 0.6]),
                row(RandMode::Startup, "friction_dynamic", [0.2, 0.6]),
                row(RandMode::Startup, "restitution", [0.0, 0.4]),
                row(RandMode::Startup, "link_mass_scale", [0.9, 1.1]),
                row(RandMode::Startup, "base_mass_add", [-1.0, 1.0]),
                row(RandMode::Startup, "armature_scale", [0.8, 1.2]),
                row(RandMode::Startup, "default_pose_offset", [-0.05, 0.05]),
                row(RandMode::Reset, "base_torque", [-5.0, 5.0]),
                RandomizationRow {
                    mode: RandMode::Interval,
                    parameter: "push_robot".into(),
                    range: [-1.0, 1.0],
                    period: Some([10.0, 15.0]),
                },
            ],
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: RandomizationConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        for row in &self.rows {
            if row.range[0] > row.range[1] {
                return Err(Error::validation(format!(
                    "row {}: range not ordered",
                    row.parameter
                )));
            }
            match (row.mode, &row.period) {
                (RandMode::Interval, None) => {
                    return Err(Error::validation(format!(
                        "interval row {} needs a period",
                        row.parameter
                    )))
                }
                (RandMode::Interval, Some(p)) if p[0] > p[1] || p[0] <= 0.0 => {
                    return Err(Error::validation(format!(
                        "row {}: period must be positive and ordered",
                        row.parameter
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn find(&self, mode: RandMode, name: &str) -> Option<&RandomizationRow> {
        self.rows
            .iter()
            .find(|r| r.mode == mode && r.parameter == name)
    }
}

/// Plant parameters visible only to the teacher.
#[derive(Debug, Clone)]
pub struct PrivilegedParams {
    pub kp: DVector<f64>,
    pub kd: DVector<f64>,
    pub joint_damping: DVector<f64>,
    /// Per-step first-order filter coefficient `1 - exp(-dt / tau)`.
    pub lag_alpha: f64,
    /// Effective inertia multiplier per joint.
    pub inertia: DVector<f64>,
    /// Magnitude scale of continuous joint/tilt disturbances.
    pub disturbance_scale: f64,
    /// Default pose after the startup offset.
    pub default_pose: DVector<f64>,
}

/// Full mutable state of one environment instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimState {
    pub joint_pos: DVector<f64>,
    pub joint_vel: DVector<f64>,
    /// Actuator-lag filter state (effective joint target).
    pub target_filtered: DVector<f64>,
    /// Planar base position (m).
    pub base_pos: Vector2<f64>,
    pub base_yaw: f64,
    /// World-frame base velocity; z is always zero in the surrogate.
    pub base_lin_vel: Vector3<f64>,
    pub base_yaw_rate: f64,
    /// Roll and pitch of the base.
    pub tilt: Vector2<f64>,
    pub tilt_rate: Vector2<f64>,
    /// Decaying push-velocity offset.
    pub push_vel: Vector2<f64>,
    pub time: f64,
    pub step_count: u64,
}

impl SimState {
    fn zeros(n: usize) -> Self {
        SimState {
            joint_pos: DVector::zeros(n),
            joint_vel: DVector::zeros(n),
            target_filtered: DVector::zeros(n),
            base_pos: Vector2::zeros(),
            base_yaw: 0.0,
            base_lin_vel: Vector3::zeros(),
            base_yaw_rate: 0.0,
            tilt: Vector2::zeros(),
            tilt_rate: Vector2::zeros(),
            push_vel: Vector2::zeros(),
            time: 0.0,
            step_count: 0,
        }
    }

    /// Base rotation matrix `Rz(yaw) Ry(pitch) Rx(roll)`.
    pub fn base_rotation(&self) -> Matrix3<f64> {
        so3::exp(&Vector3::new(0.0, 0.0, self.base_yaw))
            * so3::exp(&Vector3::new(0.0, self.tilt.y, 0.0))
            * so3::exp(&Vector3::new(self.tilt.x, 0.0, 0.0))
    }

    /// Gravity direction expressed in the body frame.
    pub fn projected_gravity(&self) -> Vector3<f64> {
        self.base_rotation().transpose() * Vector3::new(0.0, 0.0, -1.0)
    }
}

/// The toy environment.
pub struct ToyEnv {
    model: RobotModel,
    rand: RandomizationConfig,
    privileged: PrivilegedParams,
    state: SimState,
    rng: ChaCha8Rng,
    /// Commanded planar base velocity (world frame) and yaw rate.
    base_command: (Vector2<f64>, f64),
    yaw_rate_bias: f64,
    next_push_time: f64,
    /// (parameter, value) draws since construction, for coverage checks.
    sample_log: Vec<(String, f64)>,
}

fn sample(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

impl ToyEnv {
    /// Build an environment, sampling the Startup randomization rows once.
    pub fn new(
        model: RobotModel,
        nominal: DynamicsParams,
        rand: RandomizationConfig,
        startup_seed: u64,
    ) -> Result<Self> {
        model.validate()?;
        nominal.validate()?;
        rand.validate()?;
        let n = model.joint_count();
        let mut rng = ChaCha8Rng::seed_from_u64(startup_seed);
        let mut sample_log = Vec::new();

        let draw = |name: &str, default: f64, rng: &mut ChaCha8Rng,
                    log: &mut Vec<(String, f64)>| {
            match rand.find(RandMode::Startup, name) {
                Some(row) => {
                    let v = sample(rng, row.range);
                    log.push((name.to_owned(), v));
                    v
                }
                None => default,
            }
        };

        let friction_s = draw("friction_static", 0.0, &mut rng, &mut sample_log);
        let friction_d = draw("friction_dynamic", 0.0, &mut rng, &mut sample_log);
        let restitution = draw("restitution", 0.0, &mut rng, &mut sample_log);
        let mass_scale = draw("link_mass_scale", 1.0, &mut rng, &mut sample_log);
        let base_mass_add = draw("base_mass_add", 0.0, &mut rng, &mut sample_log);
        let armature = draw("armature_scale", 1.0, &mut rng, &mut sample_log);
        let pose_offset = draw("default_pose_offset", 0.0, &mut rng, &mut sample_log);

        // Surrogate mapping: friction/restitution set the disturbance
        // magnitude, masses and armature the effective inertia.
        let disturbance_scale = friction_s + friction_d + restitution;
        let inertia_mult = (mass_scale * armature + base_mass_add / 50.0).max(0.1);

        let mut default_pose = model.default_configuration();
        default_pose.apply(|v| *v += pose_offset);
        let default_pose = model.clamp_to_limits(&default_pose);

        let privileged = PrivilegedParams {
            kp: DVector::from_element(n, nominal.kp),
            kd: DVector::from_element(n, nominal.kd),
            joint_damping: DVector::from_element(n, nominal.joint_damping),
            lag_alpha: 1.0 - (-DT / nominal.lag_time_constant).exp(),
            inertia: DVector::from_element(n, inertia_mult),
            disturbance_scale,
            default_pose,
        };
        let mut env = ToyEnv {
            state: SimState::zeros(n),
            model,
            rand,
            privileged,
            rng,
            base_command: (Vector2::zeros(), 0.0),
            yaw_rate_bias: 0.0,
            next_push_time: f64::INFINITY,
            sample_log,
        };
        env.state.joint_pos = env.privileged.default_pose.clone();
        env.state.target_filtered = env.privileged.default_pose.clone();
        env.schedule_push();
        Ok(env)
    }

    pub fn model(&self) -> &RobotModel {
        &self.model
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn privileged(&self) -> &PrivilegedParams {
        &self.privileged
    }

    pub fn joint_count(&self) -> usize {
        self.model.joint_count()
    }

    pub fn sample_log(&self) -> &[(String, f64)] {
        &self.sample_log
    }

    /// Set the commanded planar base velocity (world frame) and yaw rate the
    /// base integrator follows.
    pub fn set_base_command(&mut self, lin_vel_xy: Vector2<f64>, yaw_rate: f64) {
        self.base_command = (lin_vel_xy, yaw_rate);
    }

    fn schedule_push(&mut self) {
        self.next_push_time = match self.rand.find(RandMode::Interval, "push_robot") {
            Some(row) => {
                let period = row.period.expect("validated");
                self.state.time + sample(&mut self.rng, period)
            }
            None => f64::INFINITY,
        };
    }

    /// Reset the environment; Reset-mode rows are resampled from `seed`.
    pub fn reset(&mut self, seed: u64) -> SimState {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.joint_count();
        self.state = SimState::zeros(n);

        let log_sample =
            |name: &str, v: f64, log: &mut Vec<(String, f64)>| log.push((name.to_owned(), v));

        // Joint positions: default scaled by a per-joint multiplier.
        let mut q = self.privileged.default_pose.clone();
        if let Some(row) = self.rand.find(RandMode::Reset, "joint_positions") {
            for v in q.iter_mut() {
                let m = sample(&mut self.rng, row.range);
                log_sample("joint_positions", m, &mut self.sample_log);
                *v *= m;
            }
            q = self.model.clamp_to_limits(&q);
        }
        self.state.joint_pos = q;
        self.state.target_filtered = self.state.joint_pos.clone();

        if let Some(row) = self.rand.find(RandMode::Reset, "joint_velocities") {
            for i in 0..n {
                let v = sample(&mut self.rng, row.range);
                log_sample("joint_velocities", v, &mut self.sample_log);
                self.state.joint_vel[i] = v;
            }
        }
        if let Some(row) = self.rand.find(RandMode::Reset, "init_lin_vel") {
            let vx = sample(&mut self.rng, row.range);
            let vy = sample(&mut self.rng, row.range);
            log_sample("init_lin_vel", vx, &mut self.sample_log);
            log_sample("init_lin_vel", vy, &mut self.sample_log);
            self.state.base_lin_vel = Vector3::new(vx, vy, 0.0);
            self.state.push_vel = Vector2::new(vx, vy);
        }
        if let Some(row) = self.rand.find(RandMode::Reset, "init_ang_vel") {
            let w = sample(&mut self.rng, row.range);
            log_sample("init_ang_vel", w, &mut self.sample_log);
            self.state.base_yaw_rate = w;
        }
        self.yaw_rate_bias = match self.rand.find(RandMode::Reset, "base_torque") {
            Some(row) => {
                let torque = sample(&mut self.rng, row.range);
                log_sample("base_torque", torque, &mut self.sample_log);
                torque / BASE_YAW_INERTIA
            }
            None => 0.0,
        };
        self.schedule_push();
        self.state.clone()
    }

    /// Advance one control step with the commanded joint targets.
    pub fn step(&mut self, action: &DVector<f64>) -> Result<&SimState> {
        if action.len() != self.joint_count() {
            return Err(Error::invalid(format!(
                "action length {} != {}",
                action.len(),
                self.joint_count()
            )));
        }
        if !action.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite action"));
        }
        let p = &self.privileged;
        let s = &mut self.state;
        let clamped = self.model.clamp_to_limits(action);

        // First-order actuator lag.
        s.target_filtered += (&clamped - &s.target_filtered) * p.lag_alpha;

        // PD torques plus disturbance, semi-implicit Euler.
        let scale = p.disturbance_scale;
        for i in 0..s.joint_pos.len() {
            let torque = p.kp[i] * (s.target_filtered[i] - s.joint_pos[i])
                - p.kd[i] * s.joint_vel[i]
                - p.joint_damping[i] * s.joint_vel[i];
            let disturbance = if scale > 0.0 {
                scale * self.rng.random_range(-1.0..1.0)
            } else {
                0.0
            };
            let acc = torque / p.inertia[i] + disturbance;
            s.joint_vel[i] += acc * DT;
            s.joint_pos[i] += s.joint_vel[i] * DT;
        }

        // Base: commanded velocity plus decaying push offset.
        let decay = (-DT / PUSH_DECAY_TAU).exp();
        s.push_vel *= decay;
        let (cmd_v, cmd_w) = self.base_command;
        s.base_lin_vel = Vector3::new(cmd_v.x + s.push_vel.x, cmd_v.y + s.push_vel.y, 0.0);
        s.base_pos += Vector2::new(s.base_lin_vel.x, s.base_lin_vel.y) * DT;
        s.base_yaw_rate = cmd_w + self.yaw_rate_bias;
        s.base_yaw += s.base_yaw_rate * DT;

        // Damped tilt dynamics with optional continuous disturbance.
        for i in 0..2 {
            let noise = if scale > 0.0 {
                0.5 * scale * self.rng.random_range(-1.0..1.0)
            } else {
                0.0
            };
            let acc = -TILT_STIFFNESS * s.tilt[i] - TILT_DAMPING * s.tilt_rate[i] + noise;
            s.tilt_rate[i] += acc * DT;
            s.tilt[i] += s.tilt_rate[i] * DT;
        }

        s.time += DT;
        s.step_count += 1;

        // Interval pushes.
        if s.time >= self.next_push_time {
            if let Some(row) = self.rand.find(RandMode::Interval, "push_robot") {
                let px = sample(&mut self.rng, row.range);
                let py = sample(&mut self.rng, row.range);
                self.sample_log.push(("push_robot".into(), px));
                self.sample_log.push(("push_robot".into(), py));
                s.push_vel += Vector2::new(px, py);
                s.tilt_rate += Vector2::new(py, -px) * PUSH_TILT_COUPLING;
            }
            self.schedule_push();
        }
        Ok(&self.state)
    }

    /// Proprioceptive observation:
    /// `[base lin vel (body), base ang vel, projected gravity, q, qd]`,
    /// length `9 + 2n`. No privileged entries.
    pub fn observe(&self) -> DVector<f64> {
        observe_state(&self.state)
    }

    /// Assemble the full metric state for logging and evaluation. Keypoints
    /// come from forward kinematics in the body frame; foot contact data is
    /// synthesized from the designated foot keypoints.
    pub fn full_state(
        &self,
        prev_action: &DVector<f64>,
        action: &DVector<f64>,
        joint_acc: &DVector<f64>,
    ) -> Result<RobotState> {
        let s = &self.state;
        let p = &self.privileged;
        let poses = self.model.forward_kinematics(&s.joint_pos)?;
        let torque = DVector::from_fn(s.joint_pos.len(), |i, _| {
            p.kp[i] * (s.target_filtered[i] - s.joint_pos[i]) - p.kd[i] * s.joint_vel[i]
        });
        let feet: Vec<usize> = self
            .model
            .foot_keypoints
            .iter()
            .filter_map(|n| self.model.keypoint_index(n))
            .collect();
        let upright = crate::metrics::gravity_tilt(&s.projected_gravity())
            <= crate::metrics::DEFAULT_FALL_TILT_RAD;
        let mut foot_contact_force = Vec::with_capacity(feet.len());
        let mut foot_vel_xy = Vec::with_capacity(feet.len());
        for &k in &feet {
            foot_contact_force.push(if upright { FOOT_FORCE_N } else { 0.0 });
            let jac = self.model.position_jacobian_cached(
                &self.model.joint_poses(&s.joint_pos)?,
                k,
            );
            let v = jac * &s.joint_vel;
            foot_vel_xy.push(Vector2::new(v[0], v[1]));
        }
        Ok(RobotState {
            root_lin_vel: s.base_rotation().transpose() * s.base_lin_vel,
            root_ang_vel: Vector3::new(s.tilt_rate.x, s.tilt_rate.y, s.base_yaw_rate),
            projected_gravity: s.projected_gravity(),
            joint_pos: s.joint_pos.clone(),
            joint_vel: s.joint_vel.clone(),
            joint_acc: joint_acc.clone(),
            joint_torque: torque,
            prev_action: prev_action.clone(),
            action: action.clone(),
            keypoints: poses.iter().map(|p| p.position).collect(),
            foot_contact_force,
            foot_vel_xy,
        })
    }
}

/// Observation layout shared by the environment and policies.
pub fn observe_state(state: &SimState) -> DVector<f64> {
    let n = state.joint_pos.len();
    let mut obs = DVector::zeros(9 + 2 * n);
    let body_vel = state.base_rotation().transpose() * state.base_lin_vel;
    obs.fixed_rows_mut::<3>(0).copy_from(&body_vel);
    obs.fixed_rows_mut::<3>(3).copy_from(&Vector3::new(
        state.tilt_rate.x,
        state.tilt_rate.y,
        state.base_yaw_rate,
    ));
    obs.fixed_rows_mut::<3>(6).copy_from(&state.projected_gravity());
    obs.rows_mut(9, n).copy_from(&state.joint_pos);
    obs.rows_mut(9 + n, n).copy_from(&state.joint_vel);
    obs
}

/// Observation dimension for `n` joints.
pub fn observation_dim(n: usize) -> usize {
    9 + 2 * n
}

/// Mirror pairs for the observation layout of [`observe_state`], extended
/// from a model's joint mirror map: lateral linear channels and roll/yaw
/// angular channels flip.
pub fn observation_mirror_spec(model: &RobotModel) -> Result<crate::symmetry::MirrorSpec> {
    use crate::symmetry::SignedPair;
    let n = model.joint_count();
    let joint_spec = crate::symmetry::MirrorSpec::from_model(model)?;
    let mut channels = vec![
        SignedPair::negate(1), // body-frame lateral velocity
        SignedPair::negate(3), // roll rate
        SignedPair::negate(5), // yaw rate
        SignedPair::negate(7), // lateral gravity component
    ];
    for p in &joint_spec.joint_pairs {
        channels.push(SignedPair {
            a: 9 + p.a,
            b: 9 + p.b,
            sign: p.sign,
        });
        channels.push(SignedPair {
            a: 9 + n + p.a,
            b: 9 + n + p.b,
            sign: p.sign,
        });
    }
    Ok(crate::symmetry::MirrorSpec {
        joint_pairs: joint_spec.joint_pairs,
        state_channels: channels,
        keypoint_pairs: Vec::new(),
    })
}

/// One step of reference no a teacher needs: target joints, their rate, and
/// upcoming keypoint targets.
#[derive(Debug, Clone)]
pub struct ReferenceWindow {
    pub joint_pos: DVector<f64>,
    pub joint_vel: DVector<f64>,
    /// Future keypoint positions (body frame), nearest first.
    pub future_keypoints: Vec<Vec<Vector3<f64>>>,
}

/// Privileged reference-tracking controller: inverts the actuator lag and
/// feeds the reference velocity forward through the true gains, driving the
/// plant toward the reference joints.
pub fn teacher_oracle(
    state: &SimState,
    reference: &ReferenceWindow,
    privileged: &PrivilegedParams,
) -> Result<DVector<f64>> {
    let n = state.joint_pos.len();
    if reference.joint_pos.len() != n || reference.joint_vel.len() != n {
        return Err(Error::invalid("reference dimension mismatch"));
    }
    let mut action = DVector::zeros(n);
    for i in 0..n {
        // Velocity feedforward cancels the PD tracking lag.
        let target = reference.joint_pos[i]
            + (privileged.kd[i] + privileged.joint_damping[i]) / privileged.kp[i]
                * reference.joint_vel[i];
        // Deadbeat lag inversion: one filter step lands on the target.
        action[i] =
            state.target_filtered[i] + (target - state.target_filtered[i]) / privileged.lag_alpha;
    }
    Ok(action)
}
