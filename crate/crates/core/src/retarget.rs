//! Whole-sequence inverse-kinematics retargeting.
//!
//! The full motion is solved as one nonlinear least-squares problem over the
//! stacked joint trajectory: per-frame keypoint position residuals, optional
//! end-effector orientation residuals, and frame-difference smoothness
//! residuals. Updates come from damped normal equations
//!
//! ```text
//! (J^T J + lambda I + w_smooth S^T S) dq = -J^T f
//! ```
//!
//! followed by projection onto the joint limits; a candidate is accepted only
//! if it lowers the objective, with the damping lambda adapted on
//! accept/reject.
//!
//! The system matrix is block tridiagonal (frames couple only through the
//! smoothness term). `retarget_sequence` exploits that structure; the dense
//! [`lm_step`] route exists for small problems and as the reference the block
//! solver is tested against.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{orientation_error, Pose, RobotModel};
use crate::so3;

/// Per-frame targets: keypoint positions, optionally end-effector rotations.
#[derive(Debug, Clone)]
pub struct TargetFrame {
    /// One target per model keypoint, in model keypoint order (m).
    pub positions: Vec<Vector3<f64>>,
    /// One rotation per model end effector, in model end-effector order.
    pub rotations: Option<Vec<Matrix3<f64>>>,
}

/// A whole-sequence retargeting problem.
#[derive(Debug, Clone)]
pub struct RetargetProblem {
    pub frames: Vec<TargetFrame>,
    /// Weight on squared orientation error.
    pub w_ori: f64,
    /// Weight on squared frame-to-frame joint differences.
    pub w_smooth: f64,
}

impl RetargetProblem {
    pub fn validate(&self, model: &RobotModel) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::invalid("problem has no frames"));
        }
        if !(self.w_ori >= 0.0 && self.w_smooth >= 0.0) {
            return Err(Error::invalid("weights must be non-negative"));
        }
        let with_rot = self.frames.iter().filter(|f| f.rotations.is_some()).count();
        if with_rot != 0 && with_rot != self.frames.len() {
            return Err(Error::invalid(
                "orientation targets must be present on all frames or none",
            ));
        }
        let n_ee = model.end_effector_indices().len();
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.positions.len() != model.keypoint_count() {
                return Err(Error::invalid(format!(
                    "frame {t}: {} position targets for {} keypoints",
                    frame.positions.len(),
                    model.keypoint_count()
                )));
            }
            if !frame.positions.iter().all(|p| p.iter().all(|v| v.is_finite())) {
                return Err(Error::invalid(format!("frame {t}: non-finite target")));
            }
            if let Some(rots) = &frame.rotations {
                if rots.len() != n_ee {
                    return Err(Error::invalid(format!(
                        "frame {t}: {} rotation targets for {} end effectors",
                        rots.len(),
                        n_ee
                    )));
                }
                for r in rots {
                    if so3::orthonormality_defect(r) > 1e-6 {
                        return Err(Error::invalid(format!(
                            "frame {t}: rotation target not orthonormal"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn has_orientation(&self) -> bool {
        self.frames.first().is_some_and(|f| f.rotations.is_some())
    }
}

/// Levenberg-Marquardt schedule and stopping parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LMConfig {
    pub lambda_init: f64,
    /// Multiplier applied to lambda on a rejected step (> 1).
    pub lambda_increase: f64,
    /// Divisor applied to lambda on an accepted step (> 1).
    pub lambda_decrease: f64,
    pub max_outer_iterations: usize,
    /// Stop once the accepted step's max-norm falls below this.
    pub step_tolerance: f64,
    /// Stop once the objective falls below this.
    pub residual_tolerance: f64,
}

impl Default for LMConfig {
    fn default() -> Self {
        LMConfig {
            lambda_init: 1e-3,
            lambda_increase: 2.0,
            lambda_decrease: 3.0,
            max_outer_iterations: 200,
            step_tolerance: 1e-10,
            residual_tolerance: 1e-16,
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_init > 0.0
            && self.lambda_increase > 1.0
            && self.lambda_decrease > 1.0
            && self.max_outer_iterations > 0
            && self.step_tolerance > 0.0
            && self.residual_tolerance > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("LM config values must be positive (factors > 1)"))
        }
    }
}

const LAMBDA_FLOOR: f64 = 1e-12;
const LAMBDA_CEILING: f64 = 1e12;

/// Solved trajectory with its diagnostics.
#[derive(Debug, Clone)]
pub struct RetargetResult {
    /// Per-frame joint angles, all within limits.
    pub trajectory: Vec<DVector<f64>>,
    /// Objective value at the start and after each accepted step; strictly
    /// decreasing.
    pub objective_history: Vec<f64>,
    /// Per-frame final keypoint RMSE (m).
    pub keypoint_rmse: Vec<f64>,
    pub iterations: usize,
}

impl RetargetResult {
    /// Mean over frames and keypoints of the Euclidean keypoint error (m).
    pub fn mean_keypoint_error(&self, model: &RobotModel, problem: &RetargetProblem) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for (q, frame) in self.trajectory.iter().zip(&problem.frames) {
            let poses = model.forward_kinematics(q).expect("trajectory valid");
            for (pose, target) in poses.iter().zip(&frame.positions) {
                total += (pose.position - target).norm();
                count += 1;
            }
        }
        total / count as f64
    }
}

/// Block-bidiagonal frame-difference operator: `(T-1)n x Tn` with blocks
/// `(-I, I)`; empty for a single frame.
#[derive(Debug, Clone, Copy)]
pub struct SmoothnessMatrix {
    frames: usize,
    joints: usize,
}

/// Build the smoothness operator for `frames` frames of `joints` joints.
pub fn smoothness_matrix(frames: usize, joints: usize) -> SmoothnessMatrix {
    assert!(frames >= 1 && joints >= 1);
    SmoothnessMatrix { frames, joints }
}

impl SmoothnessMatrix {
    pub fn rows(&self) -> usize {
        (self.frames - 1) * self.joints
    }

    pub fn cols(&self) -> usize {
        self.frames * self.joints
    }

    /// Materialize as a dense matrix (tests and small problems).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.joints;
        let mut m = DMatrix::zeros(self.rows(), self.cols());
        for t in 0..self.frames.saturating_sub(1) {
            for j in 0..n {
                m[(t * n + j, t * n + j)] = -1.0;
                m[(t * n + j, (t + 1) * n + j)] = 1.0;
            }
        }
        m
    }

    /// `S * x`: stacked frame differences `q_{t+1} - q_t`.
    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.cols());
        let n = self.joints;
        DVector::from_fn(self.rows(), |r, _| {
            let (t, j) = (r / n, r % n);
            x[(t + 1) * n + j] - x[t * n + j]
        })
    }

    /// `S^T S * x` without forming the Gram matrix.
    pub fn gram_mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.cols());
        let n = self.joints;
        let t_count = self.frames;
        DVector::from_fn(self.cols(), |i, _| {
            let (t, j) = (i / n, i % n);
            let mut v = 0.0;
            if t > 0 {
                v += x[t * n + j] - x[(t - 1) * n + j];
            }
            if t + 1 < t_count {
                v += x[t * n + j] - x[(t + 1) * n + j];
            }
            v
        })
    }
}

/// Residual layout bookkeeping for one problem instance.
struct ResidualLayout {
    frames: usize,
    joints: usize,
    keypoints: usize,
    oriented: usize,
    smooth_rows: bool,
}

impl ResidualLayout {
    fn new(model: &RobotModel, problem: &RetargetProblem) -> Self {
        ResidualLayout {
            frames: problem.frames.len(),
            joints: model.joint_count(),
            keypoints: model.keypoint_count(),
            oriented: if problem.has_orientation() {
                model.end_effector_indices().len()
            } else {
                0
            },
            smooth_rows: problem.w_smooth > 0.0 && problem.frames.len() > 1,
        }
    }

    fn frame_rows(&self) -> usize {
        3 * self.keypoints + 3 * self.oriented
    }

    fn total_rows(&self) -> usize {
        self.frames * self.frame_rows()
            + if self.smooth_rows {
                (self.frames - 1) * self.joints
            } else {
                0
            }
    }
}

fn check_trajectory(model: &RobotModel, problem: &RetargetProblem, q: &[DVector<f64>]) -> Result<()> {
    if q.len() != problem.frames.len() {
        return Err(Error::invalid(format!(
            "trajectory has {} frames, problem has {}",
            q.len(),
            problem.frames.len()
        )));
    }
    for (t, qt) in q.iter().enumerate() {
        if qt.len() != model.joint_count() {
            return Err(Error::invalid(format!(
                "frame {t}: joint vector length {} != {}",
                qt.len(),
                model.joint_count()
            )));
        }
    }
    Ok(())
}

/// Per-frame residual block: keypoint position errors then weighted
/// orientation errors, in model order.
fn frame_residual(
    model: &RobotModel,
    problem: &RetargetProblem,
    poses: &[Pose],
    frame: &TargetFrame,
) -> Result<DVector<f64>> {
    let ee = model.end_effector_indices();
    let oriented = if frame.rotations.is_some() { ee.len() } else { 0 };
    let mut r = DVector::zeros(3 * model.keypoint_count() + 3 * oriented);
    for (k, target) in frame.positions.iter().enumerate() {
        let e = poses[k].position - target;
        r.fixed_rows_mut::<3>(3 * k).copy_from(&e);
    }
    if let Some(rots) = &frame.rotations {
        let sqrt_w = problem.w_ori.sqrt();
        for (i, (&k, target)) in ee.iter().zip(rots).enumerate() {
            let dr = orientation_error(&poses[k].rotation, target)?;
            r.fixed_rows_mut::<3>(3 * model.keypoint_count() + 3 * i)
                .copy_from(&(dr * sqrt_w));
        }
    }
    Ok(r)
}

/// Stacked residual vector: per frame the position and weighted orientation
/// blocks, then all weighted smoothness blocks `sqrt(w_smooth) (q_t - q_{t-1})`.
pub fn build_residuals(
    problem: &RetargetProblem,
    model: &RobotModel,
    trajectory: &[DVector<f64>],
) -> Result<DVector<f64>> {
    problem.validate(model)?;
    check_trajectory(model, problem, trajectory)?;
    let layout = ResidualLayout::new(model, problem);
    let mut f = DVector::zeros(layout.total_rows());
    for (t, (q, frame)) in trajectory.iter().zip(&problem.frames).enumerate() {
        let poses = model.forward_kinematics(q)?;
        let r = frame_residual(model, problem, &poses, frame)?;
        f.rows_mut(t * layout.frame_rows(), layout.frame_rows())
            .copy_from(&r);
    }
    if layout.smooth_rows {
        let sqrt_w = problem.w_smooth.sqrt();
        let base = layout.frames * layout.frame_rows();
        for t in 1..layout.frames {
            let diff = (&trajectory[t] - &trajectory[t - 1]) * sqrt_w;
            f.rows_mut(base + (t - 1) * layout.joints, layout.joints)
                .copy_from(&diff);
        }
    }
    Ok(f)
}

/// Jacobian of one frame's residual block with respect to that frame's
/// joints: position rows are the keypoint Jacobians; orientation rows are
/// `sqrt(w_ori) * Jl^{-1}(dr) * R_target^T * a_j_world` per ancestor joint.
fn frame_jacobian(
    model: &RobotModel,
    problem: &RetargetProblem,
    q: &DVector<f64>,
    frame: &TargetFrame,
) -> Result<DMatrix<f64>> {
    let n = model.joint_count();
    let joint_poses = model.joint_poses(q)?;
    let ee = model.end_effector_indices();
    let oriented = if frame.rotations.is_some() { ee.len() } else { 0 };
    let mut jac = DMatrix::zeros(3 * model.keypoint_count() + 3 * oriented, n);

    for k in 0..model.keypoint_count() {
        let block = model.position_jacobian_cached(&joint_poses, k);
        jac.rows_mut(3 * k, 3).copy_from(&block);
    }

    if let Some(rots) = &frame.rotations {
        let sqrt_w = problem.w_ori.sqrt();
        let axes = model.world_axes(&joint_poses);
        for (i, (&k, target)) in ee.iter().zip(rots).enumerate() {
            let actual = &joint_poses[model.keypoints[k].joint].rotation;
            let dr = orientation_error(actual, target)?;
            let jl_inv = so3::inv_left_jacobian(&dr);
            let row0 = 3 * model.keypoint_count() + 3 * i;
            let mut cur = model.keypoints[k].joint as i64;
            while cur >= 0 {
                let j = cur as usize;
                let col = jl_inv * (target.transpose() * axes[j]) * sqrt_w;
                jac.fixed_view_mut::<3, 1>(row0, j).copy_from(&col);
                cur = model.joints[j].parent;
            }
        }
    }
    Ok(jac)
}

/// Dense Jacobian of [`build_residuals`] with respect to the stacked
/// trajectory, including the smoothness rows.
pub fn build_jacobian(
    problem: &RetargetProblem,
    model: &RobotModel,
    trajectory: &[DVector<f64>],
) -> Result<DMatrix<f64>> {
    problem.validate(model)?;
    check_trajectory(model, problem, trajectory)?;
    let layout = ResidualLayout::new(model, problem);
    let n = layout.joints;
    let mut jac = DMatrix::zeros(layout.total_rows(), layout.frames * n);
    for (t, (q, frame)) in trajectory.iter().zip(&problem.frames).enumerate() {
        let block = frame_jacobian(model, problem, q, frame)?;
        jac.view_mut((t * layout.frame_rows(), t * n), (layout.frame_rows(), n))
            .copy_from(&block);
    }
    if layout.smooth_rows {
        let sqrt_w = problem.w_smooth.sqrt();
        let base = layout.frames * layout.frame_rows();
        for t in 1..layout.frames {
            for j in 0..n {
                jac[(base + (t - 1) * n + j, (t - 1) * n + j)] = -sqrt_w;
                jac[(base + (t - 1) * n + j, t * n + j)] = sqrt_w;
            }
        }
    }
    Ok(jac)
}

/// Solve the damped normal equations
/// `(J^T J + lambda I + w_smooth S^T S) dq = -J^T f` densely.
pub fn lm_step(
    jacobian: &DMatrix<f64>,
    residuals: &DVector<f64>,
    lambda: f64,
    w_smooth: f64,
    smoothness: &SmoothnessMatrix,
) -> Result<DVector<f64>> {
    if jacobian.nrows() != residuals.len() {
        return Err(Error::invalid("Jacobian rows != residual length"));
    }
    if smoothness.cols() != jacobian.ncols() {
        return Err(Error::invalid("smoothness matrix cols != Jacobian cols"));
    }
    let n = jacobian.ncols();
    let mut system = jacobian.transpose() * jacobian;
    for i in 0..n {
        system[(i, i)] += lambda;
    }
    if w_smooth > 0.0 && smoothness.rows() > 0 {
        let s = smoothness.to_dense();
        system += s.transpose() * s * w_smooth;
    }
    let rhs = -(jacobian.transpose() * residuals);
    let rhs_norm = rhs.norm();
    let chol = system
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("damped normal equations are singular; use lambda > 0"))?;
    let dq = chol.solve(&rhs);
    let defect = (&system * &dq - &rhs).norm();
    if defect > 1e-8 * rhs_norm.max(1e-300) && rhs_norm > 0.0 {
        return Err(Error::numerical(format!(
            "normal-equation solve residual {defect:.3e} exceeds tolerance"
        )));
    }
    Ok(dq)
}

/// Block-tridiagonal factorization/solve of the same damped system, using
/// only per-frame Jacobian blocks. Agrees with [`lm_step`] to solver
/// precision (see tests).
struct BlockTridiagonal {
    /// Diagonal blocks, n x n each.
    diag: Vec<DMatrix<f64>>,
    /// Constant off-diagonal coefficient times identity (from S^T S).
    off: f64,
    joints: usize,
}

impl BlockTridiagonal {
    /// Solve via block LDL^T (block Thomas algorithm).
    fn solve(&self, rhs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let t_count = self.diag.len();
        let n = self.joints;
        let mut factors: Vec<nalgebra::Cholesky<f64, nalgebra::Dyn>> =
            Vec::with_capacity(t_count);
        let mut y: Vec<DVector<f64>> = Vec::with_capacity(t_count);
        // Forward sweep: D_t' = D_t - off^2 * (D_{t-1}')^{-1}.
        for t in 0..t_count {
            let mut d = self.diag[t].clone();
            let mut b = rhs[t].clone();
            if t > 0 {
                let inv_prev_d = factors[t - 1].inverse();
                d -= inv_prev_d * (self.off * self.off);
                b -= factors[t - 1].solve(&y[t - 1]) * self.off;
            }
            let chol = d
                .cholesky()
                .ok_or_else(|| Error::numerical("block pivot is not positive definite"))?;
            factors.push(chol);
            y.push(b);
        }
        // Back substitution.
        let mut x = vec![DVector::zeros(n); t_count];
        for t in (0..t_count).rev() {
            let mut b = y[t].clone();
            if t + 1 < t_count {
                b -= &x[t + 1] * self.off;
            }
            x[t] = factors[t].solve(&b);
        }
        Ok(x)
    }
}

/// Objective value: squared norm of the full residual vector.
fn objective(model: &RobotModel, problem: &RetargetProblem, q: &[DVector<f64>]) -> Result<f64> {
    let f = build_residuals(problem, model, q)?;
    let v = f.norm_squared();
    if !v.is_finite() {
        return Err(Error::numerical("objective is not finite"));
    }
    Ok(v)
}

/// Mid-range initial trajectory replicated across frames.
pub fn default_initial_trajectory(model: &RobotModel, frames: usize) -> Vec<DVector<f64>> {
    let q = model.clamp_to_limits(&model.default_configuration());
    vec![q; frames]
}

/// Damped single-frame IK used by the warm-start initializer.
fn solve_single_frame(
    model: &RobotModel,
    problem: &RetargetProblem,
    frame: &TargetFrame,
    mut q: DVector<f64>,
    iterations: usize,
) -> Result<(DVector<f64>, f64)> {
    let n = model.joint_count();
    let mut lambda = 1e-3;
    let mut obj = {
        let poses = model.forward_kinematics(&q)?;
        frame_residual(model, problem, &poses, frame)?.norm_squared()
    };
    for _ in 0..iterations {
        let jac = frame_jacobian(model, problem, &q, frame)?;
        let poses = model.forward_kinematics(&q)?;
        let res = frame_residual(model, problem, &poses, frame)?;
        let jtj = jac.transpose() * &jac;
        let jtf = jac.transpose() * res;
        loop {
            let mut system = jtj.clone();
            for i in 0..n {
                system[(i, i)] += lambda;
            }
            let Some(chol) = system.cholesky() else {
                lambda *= 2.0;
                continue;
            };
            let dq = chol.solve(&(-&jtf));
            let candidate = model.clamp_to_limits(&(&q + dq));
            let cand_poses = model.forward_kinematics(&candidate)?;
            let cand_obj =
                frame_residual(model, problem, &cand_poses, frame)?.norm_squared();
            if cand_obj < obj {
                q = candidate;
                obj = cand_obj;
                lambda = (lambda / 3.0).max(LAMBDA_FLOOR);
                break;
            }
            lambda *= 2.0;
            if lambda > LAMBDA_CEILING {
                return Ok((q, obj));
            }
        }
        if obj < 1e-18 {
            break;
        }
    }
    Ok((q, obj))
}

/// Sequential warm-start initializer: each frame is solved by single-frame
/// damped IK starting from the previous frame's solution (the first from
/// mid-range), with deterministic random restarts when a frame stalls in a
/// poor basin. The result is limit-feasible and usually close to the
/// whole-sequence optimum.
pub fn warm_start_trajectory(
    model: &RobotModel,
    problem: &RetargetProblem,
) -> Result<Vec<DVector<f64>>> {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    const RESTARTS: usize = 8;
    const FRAME_ITERATIONS: usize = 60;
    // Residual below which a frame's basin is accepted without restarts.
    const RESTART_THRESHOLD: f64 = 1e-10;

    let mut out: Vec<DVector<f64>> = Vec::with_capacity(problem.frames.len());
    let mut q_prev = model.clamp_to_limits(&model.default_configuration());
    for (t, frame) in problem.frames.iter().enumerate() {
        let (mut best_q, mut best_obj) =
            solve_single_frame(model, problem, frame, q_prev.clone(), FRAME_ITERATIONS)?;
        if best_obj > RESTART_THRESHOLD {
            for attempt in 0..RESTARTS {
                let seed = 0x7265_7374u64 ^ ((t as u64) << 16) ^ attempt as u64;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let q0 = DVector::from_iterator(
                    model.joint_count(),
                    model
                        .joints
                        .iter()
                        .map(|j| rng.random_range(j.limits[0]..=j.limits[1])),
                );
                let (q, obj) =
                    solve_single_frame(model, problem, frame, q0, FRAME_ITERATIONS)?;
                if obj < best_obj {
                    best_q = q;
                    best_obj = obj;
                }
                if best_obj <= RESTART_THRESHOLD {
                    break;
                }
            }
        }
        q_prev = best_q.clone();
        out.push(best_q);
    }
    Ok(out)
}

/// Solve the whole-sequence retargeting problem with accept/reject LM and
/// joint-limit projection.
pub fn retarget_sequence(
    model: &RobotModel,
    problem: &RetargetProblem,
    config: &LMConfig,
    q_init: Option<&[DVector<f64>]>,
) -> Result<RetargetResult> {
    problem.validate(model)?;
    config.validate()?;
    let t_count = problem.frames.len();
    let n = model.joint_count();

    let mut q: Vec<DVector<f64>> = match q_init {
        Some(init) => {
            check_trajectory(model, problem, init)?;
            for (t, qt) in init.iter().enumerate() {
                if !model.within_limits(qt) {
                    return Err(Error::invalid(format!(
                        "initial trajectory violates joint limits at frame {t}"
                    )));
                }
            }
            init.to_vec()
        }
        None => warm_start_trajectory(model, problem)?,
    };

    let mut lambda = config.lambda_init;
    let mut obj = objective(model, problem, &q)?;
    let mut history = vec![obj];
    let mut iterations = 0;

    // Double-counted smoothness coefficient: J already contains the
    // smoothness rows, and the update equation adds w_smooth S^T S again.
    let smooth_lhs = 2.0 * problem.w_smooth;

    'outer: for _ in 0..config.max_outer_iterations {
        iterations += 1;

        // Per-frame Gauss-Newton blocks.
        let mut jtj: Vec<DMatrix<f64>> = Vec::with_capacity(t_count);
        let mut jtf: Vec<DVector<f64>> = Vec::with_capacity(t_count);
        for (qt, frame) in q.iter().zip(&problem.frames) {
            let jac = frame_jacobian(model, problem, qt, frame)?;
            let poses = model.forward_kinematics(qt)?;
            let res = frame_residual(model, problem, &poses, frame)?;
            jtj.push(jac.transpose() * &jac);
            jtf.push(jac.transpose() * res);
        }

        // Gradient contribution of the smoothness rows: w * S^T S * q.
        let use_smooth = problem.w_smooth > 0.0 && t_count > 1;

        loop {
            let mut diag = jtj.clone();
            let mut rhs: Vec<DVector<f64>> = Vec::with_capacity(t_count);
            for t in 0..t_count {
                let couplings = if !use_smooth {
                    0.0
                } else if t == 0 || t + 1 == t_count {
                    1.0
                } else {
                    2.0
                };
                for i in 0..n {
                    diag[t][(i, i)] += lambda + smooth_lhs * couplings;
                }
                let mut g = -&jtf[t];
                if use_smooth {
                    let mut sts = q[t].clone() * couplings;
                    if t > 0 {
                        sts -= &q[t - 1];
                    }
                    if t + 1 < t_count {
                        sts -= &q[t + 1];
                    }
                    g -= sts * problem.w_smooth;
                }
                rhs.push(g);
            }
            let system = BlockTridiagonal {
                diag,
                off: if use_smooth { -smooth_lhs } else { 0.0 },
                joints: n,
            };
            let dq = system.solve(&rhs)?;

            let candidate: Vec<DVector<f64>> = q
                .iter()
                .zip(&dq)
                .map(|(qt, d)| model.clamp_to_limits(&(qt + d)))
                .collect();
            let cand_obj = objective(model, problem, &candidate)?;

            if cand_obj < obj {
                let step = candidate
                    .iter()
                    .zip(&q)
                    .map(|(a, b)| (a - b).amax())
                    .fold(0.0f64, f64::max);
                q = candidate;
                obj = cand_obj;
                history.push(obj);
                lambda = (lambda / config.lambda_decrease).max(LAMBDA_FLOOR);
                if step < config.step_tolerance || obj < config.residual_tolerance {
                    break 'outer;
                }
                break;
            }
            lambda *= config.lambda_increase;
            if lambda > LAMBDA_CEILING {
                break 'outer;
            }
        }
    }

    let keypoint_rmse = q
        .iter()
        .zip(&problem.frames)
        .map(|(qt, frame)| {
            let poses = model.forward_kinematics(qt).expect("validated");
            let sq: f64 = poses
                .iter()
                .zip(&frame.positions)
                .map(|(p, t)| (p.position - t).norm_squared())
                .sum();
            (sq / frame.positions.len() as f64).sqrt()
        })
        .collect();

    Ok(RetargetResult {
        trajectory: q,
        objective_history: history,
        keypoint_rmse,
        iterations,
    })
}
