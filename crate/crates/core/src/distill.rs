//! Teacher-student distillation: the experience buffer, on-policy data
//! collection with teacher labeling, the training loop, curriculum
//! scheduling, latent-space interpolation rollouts, and latent dumping.
//!
//! The student acts in every environment; for each visited state the teacher
//! label is computed at collection time and stored, and the student is
//! updated by passes over the aggregate buffer. Root tracking during
//! collection uses displacements relative to past positions, so accumulated
//! drift does not push the teacher out of distribution; a rollout is
//! re-anchored (environment reset) only when the relative displacement error
//! grows past a threshold.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cvae::{
    adam_update, adam_update_layers, decode, encode, inference_act, loss_and_gradients, AdamHyper,
    AdamState, CvaeConfig, CvaeParams, LossStats, Mlp, TrainSample,
};
use crate::error::{Error, Result};
use crate::metrics::{self, Difficulty, ReferenceFrame};
use crate::sim::{PrivilegedParams, ReferenceWindow, SimState, ToyEnv};
use crate::textenc::{self, TextEmbedding};

/// Teacher labeling function; queried for every state the student visits.
pub type TeacherFn<'a> =
    &'a dyn Fn(&SimState, &ReferenceWindow, &PrivilegedParams) -> Result<DVector<f64>>;

// ---------------------------------------------------------------------------
// Experience buffer
// ---------------------------------------------------------------------------

/// FIFO ring buffer of training samples.
#[derive(Debug, Clone)]
pub struct ExperienceBuffer {
    entries: VecDeque<TrainSample>,
    capacity: usize,
}

impl ExperienceBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1);
        ExperienceBuffer {
            entries: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, sample: TrainSample) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(sample);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, idx: usize) -> &TrainSample {
        &self.entries[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &TrainSample> {
        self.entries.iter()
    }
}

// ---------------------------------------------------------------------------
// Motion library
// ---------------------------------------------------------------------------

/// One reference frame of a library motion.
#[derive(Debug, Clone)]
pub struct MotionFrame {
    pub joints: DVector<f64>,
    /// Keypoint positions in the body frame.
    pub keypoints: Vec<Vector3<f64>>,
    /// Root position in the world frame.
    pub root_pos: Vector3<f64>,
}

/// A named reference motion with its text caption and difficulty label.
#[derive(Debug, Clone)]
pub struct MotionClip {
    pub name: String,
    pub caption: String,
    pub fps: f64,
    pub frames: Vec<MotionFrame>,
    pub label: Difficulty,
}

impl MotionClip {
    /// Difficulty from peak world-frame keypoint speed.
    pub fn classify(&self, threshold: f64) -> Result<Difficulty> {
        let world: Vec<Vec<Vector3<f64>>> = self
            .frames
            .iter()
            .map(|f| f.keypoints.iter().map(|p| p + f.root_pos).collect())
            .collect();
        metrics::classify_motion(&world, self.fps, threshold)
    }

    pub fn validate(&self, joint_count: usize) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::validation(format!(
                "motion {}: needs at least two frames",
                self.name
            )));
        }
        if self.caption.trim().is_empty() {
            return Err(Error::validation(format!(
                "motion {}: caption required",
                self.name
            )));
        }
        let k = self.frames[0].keypoints.len();
        for (t, f) in self.frames.iter().enumerate() {
            if f.joints.len() != joint_count || f.keypoints.len() != k {
                return Err(Error::validation(format!(
                    "motion {}: frame {t} dimension mismatch",
                    self.name
                )));
            }
        }
        let expected = self.classify(metrics::DEFAULT_HARD_SPEED_THRESHOLD)?;
        if expected != self.label {
            return Err(Error::validation(format!(
                "motion {}: label {:?} inconsistent with measured difficulty {:?}",
                self.name, self.label, expected
            )));
        }
        Ok(())
    }

    fn wrap(&self, cursor: usize) -> usize {
        cursor % self.frames.len()
    }

    /// Reference window at a frame cursor: joints, finite-difference joint
    /// velocity, and the next few keypoint frames.
    pub fn reference_window(&self, cursor: usize) -> ReferenceWindow {
        let cur = self.wrap(cursor);
        let next = self.wrap(cursor + 1);
        let joint_vel = (&self.frames[next].joints - &self.frames[cur].joints) * self.fps;
        let future_keypoints = (1..=5)
            .map(|d| self.frames[self.wrap(cursor + d)].keypoints.clone())
            .collect();
        ReferenceWindow {
            joint_pos: self.frames[cur].joints.clone(),
            joint_vel,
            future_keypoints,
        }
    }

    /// Metric reference for quality evaluation at a cursor.
    pub fn reference_frame(&self, cursor: usize, foot_keypoints: &[usize]) -> ReferenceFrame {
        let f = &self.frames[self.wrap(cursor)];
        let feet_height_diff = if foot_keypoints.len() == 2 {
            (f.keypoints[foot_keypoints[0]].z - f.keypoints[foot_keypoints[1]].z).abs()
        } else {
            0.0
        };
        ReferenceFrame {
            keypoints: f.keypoints.clone(),
            joint_pos: f.joints.clone(),
            feet_height_diff,
            stance_duration: 0.0,
        }
    }

    /// Planar root velocity at a cursor (finite difference).
    pub fn root_velocity(&self, cursor: usize) -> Vector2<f64> {
        let cur = self.wrap(cursor);
        let next = self.wrap(cursor + 1);
        let d = (self.frames[next].root_pos - self.frames[cur].root_pos) * self.fps;
        Vector2::new(d.x, d.y)
    }
}

/// Named retargeted reference motions with captions and difficulty labels.
#[derive(Debug, Clone, Default)]
pub struct MotionLibrary {
    pub clips: Vec<MotionClip>,
}

impl MotionLibrary {
    pub fn validate(&self, joint_count: usize) -> Result<()> {
        if self.clips.is_empty() {
            return Err(Error::validation("motion library is empty"));
        }
        for clip in &self.clips {
            clip.validate(joint_count)?;
        }
        Ok(())
    }

    /// Index of the clip whose caption embedding is most similar to a text.
    pub fn nearest_by_caption(&self, text: &str) -> Result<usize> {
        let query = textenc::embed_text(text)?;
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (i, clip) in self.clips.iter().enumerate() {
            let s = textenc::similarity(&query, &textenc::embed_text(&clip.caption)?);
            if s > best_sim {
                best_sim = s;
                best = i;
            }
        }
        Ok(best)
    }
}

// ---------------------------------------------------------------------------
// Curriculum
// ---------------------------------------------------------------------------

/// How tracking progress unlocks harder motions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurriculumConfig {
    /// Progress above which Hard motions join the active set.
    pub unlock_threshold: f64,
    /// Iterations of the running quality mean that define progress.
    pub window: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            unlock_threshold: 0.8,
            window: 50,
        }
    }
}

/// Active clip indices for a progress level: Easy motions always, Hard
/// motions once progress exceeds the threshold. Monotone in progress.
pub fn curriculum_schedule(
    library: &MotionLibrary,
    progress: f64,
    unlock_threshold: f64,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::invalid("progress must lie in [0, 1]"));
    }
    Ok(library
        .clips
        .iter()
        .enumerate()
        .filter(|(_, c)| c.label == Difficulty::Easy || progress > unlock_threshold)
        .map(|(i, _)| i)
        .collect())
}

// ---------------------------------------------------------------------------
// Relative displacement
// ---------------------------------------------------------------------------

/// Squared error between the robot's displacement and the reference
/// displacement over the same interval. Invariant to constant offsets of
/// either trajectory.
pub fn relative_displacement_error(
    p_t: &Vector3<f64>,
    p_prev: &Vector3<f64>,
    ref_t: &Vector3<f64>,
    ref_prev: &Vector3<f64>,
) -> f64 {
    ((p_t - p_prev) - (ref_t - ref_prev)).norm_squared()
}

// ---------------------------------------------------------------------------
// Students
// ---------------------------------------------------------------------------

/// Student architecture variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentKind {
    /// Stochastic latent with KL regularization.
    Cvae,
    /// Same stack run deterministically with no KL term: the latent is the
    /// mean head output and the log-sigma head is inert.
    Mlp,
}

/// Architecture-specific parameters of a student.
#[derive(Debug, Clone)]
pub enum StudentArch {
    Cvae(CvaeParams),
    /// Plain feed-forward stack over `[history, text, observation]` with the
    /// same hidden sizes (and so roughly the same parameter budget) as the
    /// CVAE, trained by pure regression.
    Mlp(Mlp),
}

/// Hidden sizes of the plain-MLP baseline: the encoder stack followed by the
/// decoder stack.
fn mlp_dims(config: &CvaeConfig) -> Vec<usize> {
    let mut dims = vec![config.history_flat_dim() + config.text_dim + config.obs_dim];
    dims.extend_from_slice(&config.encoder_hidden);
    dims.extend_from_slice(&config.decoder_hidden);
    dims.push(config.action_dim);
    dims
}

/// A trainable student policy.
#[derive(Debug, Clone)]
pub struct Student {
    pub kind: StudentKind,
    pub config: CvaeConfig,
    pub arch: StudentArch,
    pub hyper: AdamHyper,
    adam: AdamState,
}

impl Student {
    pub fn new(kind: StudentKind, config: CvaeConfig, hyper: AdamHyper, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        config.validate()?;
        let arch = match kind {
            StudentKind::Cvae => StudentArch::Cvae(CvaeParams::init(&config, &mut rng)?),
            StudentKind::Mlp => StudentArch::Mlp(Mlp::init(&mlp_dims(&config), false, &mut rng)),
        };
        Self::from_arch(kind, config, arch, hyper)
    }

    pub fn from_arch(
        kind: StudentKind,
        config: CvaeConfig,
        arch: StudentArch,
        hyper: AdamHyper,
    ) -> Result<Self> {
        let adam = match &arch {
            StudentArch::Cvae(params) => {
                if kind != StudentKind::Cvae {
                    return Err(Error::validation("architecture does not match student kind"));
                }
                params.check_shapes(&config)?;
                AdamState::new(params)
            }
            StudentArch::Mlp(mlp) => {
                if kind != StudentKind::Mlp {
                    return Err(Error::validation("architecture does not match student kind"));
                }
                let dims = mlp_dims(&config);
                if mlp.layers.len() + 1 != dims.len()
                    || mlp
                        .layers
                        .iter()
                        .zip(dims.windows(2))
                        .any(|(l, d)| l.w.ncols() != d[0] || l.w.nrows() != d[1])
                {
                    return Err(Error::validation("MLP layer shapes do not match config"));
                }
                AdamState::for_layers(&mlp.layers.iter().collect::<Vec<_>>())
            }
        };
        Ok(Student {
            kind,
            config,
            arch,
            hyper,
            adam,
        })
    }

    /// The CVAE parameters, when this student is a CVAE.
    pub fn cvae_params(&self) -> Result<&CvaeParams> {
        match &self.arch {
            StudentArch::Cvae(params) => Ok(params),
            StudentArch::Mlp(_) => Err(Error::validation(
                "operation requires the CVAE architecture",
            )),
        }
    }

    fn mlp_input(&self, obs_history: &DVector<f64>, text: &DVector<f64>, obs: &DVector<f64>) -> DMatrix<f64> {
        let mut input = DMatrix::zeros(obs_history.len() + text.len() + obs.len(), 1);
        input.view_mut((0, 0), (obs_history.len(), 1)).copy_from(obs_history);
        input
            .view_mut((obs_history.len(), 0), (text.len(), 1))
            .copy_from(text);
        input
            .view_mut((obs_history.len() + text.len(), 0), (obs.len(), 1))
            .copy_from(obs);
        input
    }

    /// Deterministic action from history, text, and the current observation.
    pub fn act(
        &self,
        obs_history: &DVector<f64>,
        text: &DVector<f64>,
        obs: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        match &self.arch {
            StudentArch::Cvae(params) => {
                inference_act(params, &self.config, obs_history, text, obs)
            }
            StudentArch::Mlp(mlp) => {
                if obs_history.len() != self.config.history_flat_dim()
                    || text.len() != self.config.text_dim
                    || obs.len() != self.config.obs_dim
                {
                    return Err(Error::invalid("MLP input dimension mismatch"));
                }
                let out = mlp.forward(&self.mlp_input(obs_history, text, obs));
                Ok(out.column(0).into_owned())
            }
        }
    }

    /// Posterior mean latent for a history and text input (CVAE only).
    pub fn encode_mean(&self, obs_history: &DVector<f64>, text: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(encode(self.cvae_params()?, &self.config, obs_history, text)?.mu)
    }

    /// Decode a latent with the current observation (CVAE only).
    pub fn decode_action(&self, z: &DVector<f64>, obs: &DVector<f64>) -> Result<DVector<f64>> {
        decode(self.cvae_params()?, &self.config, z, obs)
    }

    /// One optimizer step on a batch. The CVAE samples latents through the
    /// reparameterization trick and pays the KL term; the plain MLP runs
    /// pure regression.
    pub fn train_batch(&mut self, batch: &[TrainSample], rng: &mut ChaCha8Rng) -> Result<LossStats> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        match &mut self.arch {
            StudentArch::Cvae(params) => {
                let eps = DMatrix::from_fn(self.config.latent_dim, batch.len(), |_, _| {
                    standard_normal(rng)
                });
                let (stats, grads) =
                    loss_and_gradients(params, &self.config, batch, &eps, self.config.lambda_kl)?;
                adam_update(params, &grads, &mut self.adam, &self.hyper);
                Ok(stats)
            }
            StudentArch::Mlp(mlp) => {
                let b = batch.len();
                let in_dim = mlp.input_dim();
                let mut input = DMatrix::zeros(in_dim, b);
                let mut target = DMatrix::zeros(self.config.action_dim, b);
                for (i, s) in batch.iter().enumerate() {
                    let hist = s.obs_history.len();
                    let text = s.text.len();
                    if hist + text + s.obs.len() != in_dim {
                        return Err(Error::invalid(format!("sample {i} has wrong dimensions")));
                    }
                    input.view_mut((0, i), (hist, 1)).copy_from(&s.obs_history);
                    input.view_mut((hist, i), (text, 1)).copy_from(&s.text);
                    input
                        .view_mut((hist + text, i), (s.obs.len(), 1))
                        .copy_from(&s.obs);
                    target
                        .view_mut((0, i), (self.config.action_dim, 1))
                        .copy_from(&s.target_action);
                }
                let cache = mlp.forward_cached(&input);
                let diff = cache.output() - &target;
                let recon = diff.column_iter().map(|c| c.norm_squared()).sum::<f64>() / b as f64;
                if !recon.is_finite() {
                    return Err(Error::numerical("non-finite MLP loss"));
                }
                let mut grads = mlp.zero_grads();
                mlp.backward(&cache, diff * (2.0 / b as f64), &mut grads);
                adam_update_layers(
                    &mut mlp.layers.iter_mut().collect::<Vec<_>>(),
                    &grads.iter().collect::<Vec<_>>(),
                    &mut self.adam,
                    &self.hyper,
                );
                Ok(LossStats {
                    total: recon,
                    reconstruction: recon,
                    kl: 0.0,
                })
            }
        }
    }
}

/// Box-Muller standard normal on explicit ChaCha bits, keeping training
/// streams platform-pinned.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand_chacha::rand_core::RngCore;
    let to_unit = |x: u64| ((x >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
    let u1 = to_unit(rng.next_u64());
    let u2 = to_unit(rng.next_u64());
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// ---------------------------------------------------------------------------
// Observation history
// ---------------------------------------------------------------------------

/// Rolling window of per-step `[observation, previous action]` entries,
/// flattened time-major (oldest first) at the configured stride.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    steps: VecDeque<DVector<f64>>,
    entry_dim: usize,
    history_len: usize,
    stride: usize,
}

impl HistoryBuffer {
    pub fn new(config: &CvaeConfig) -> Self {
        let capacity = (config.history_len - 1) * config.history_stride + 1;
        HistoryBuffer {
            steps: VecDeque::with_capacity(capacity),
            entry_dim: config.history_entry_dim(),
            history_len: config.history_len,
            stride: config.history_stride,
        }
    }

    fn capacity(&self) -> usize {
        (self.history_len - 1) * self.stride + 1
    }

    fn make_entry(&self, obs: &DVector<f64>, prev_action: &DVector<f64>) -> DVector<f64> {
        let mut entry = DVector::zeros(self.entry_dim);
        entry.rows_mut(0, obs.len()).copy_from(obs);
        if self.entry_dim > obs.len() {
            entry
                .rows_mut(obs.len(), prev_action.len())
                .copy_from(prev_action);
        }
        entry
    }

    /// Fill the whole window with one entry (used at episode starts).
    pub fn reset(&mut self, obs: &DVector<f64>, prev_action: &DVector<f64>) {
        let entry = self.make_entry(obs, prev_action);
        self.steps.clear();
        for _ in 0..self.capacity() {
            self.steps.push_back(entry.clone());
        }
    }

    pub fn push(&mut self, obs: &DVector<f64>, prev_action: &DVector<f64>) {
        if self.steps.len() == self.capacity() {
            self.steps.pop_front();
        }
        self.steps.push_back(self.make_entry(obs, prev_action));
    }

    /// Flattened window: `history_len` entries at the stride, oldest first,
    /// newest entry last.
    pub fn flatten(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.history_len * self.entry_dim);
        let last = self.steps.len() - 1;
        for k in 0..self.history_len {
            let back = (self.history_len - 1 - k) * self.stride;
            let entry = &self.steps[last - back.min(last)];
            out.rows_mut(k * self.entry_dim, self.entry_dim).copy_from(entry);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Collection
// ---------------------------------------------------------------------------

/// Per-environment rollout bookkeeping during collection.
#[derive(Debug, Clone)]
pub struct TaskState {
    pub clip: usize,
    pub cursor: usize,
    pub history: HistoryBuffer,
    pub prev_action: DVector<f64>,
    text: DVector<f64>,
    root_window: VecDeque<Vector3<f64>>,
    ref_root_window: VecDeque<Vector3<f64>>,
}

impl TaskState {
    pub fn new(config: &CvaeConfig, n_joints: usize) -> Self {
        TaskState {
            clip: 0,
            cursor: 0,
            history: HistoryBuffer::new(config),
            prev_action: DVector::zeros(n_joints),
            text: DVector::zeros(config.text_dim),
            root_window: VecDeque::new(),
            ref_root_window: VecDeque::new(),
        }
    }

    /// Bind to a clip and re-anchor on a freshly reset environment.
    pub fn assign(&mut self, clip: usize, embedding: &TextEmbedding, env: &mut ToyEnv, seed: u64) {
        self.clip = clip;
        self.cursor = 0;
        self.text = embedding.as_vector().clone();
        self.prev_action.fill(0.0);
        env.reset(seed);
        let obs = env.observe();
        self.history.reset(&obs, &self.prev_action);
        self.root_window.clear();
        self.ref_root_window.clear();
    }
}

/// Collection settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CollectConfig {
    /// Steps gathered per environment per call.
    pub horizon: usize,
    /// Relative-displacement interval in control steps (0.1 s at 50 Hz).
    pub rel_disp_steps: usize,
    /// Squared-error threshold above which a rollout is re-anchored.
    pub rel_disp_threshold: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            horizon: 8,
            rel_disp_steps: 5,
            rel_disp_threshold: 0.25,
        }
    }
}

/// Who steps the environments during collection.
pub enum RolloutPolicy<'a> {
    Student(&'a Student),
    /// The teacher drives its own labels (student identical to teacher).
    Teacher,
}

/// Aggregate statistics of one collection pass.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CollectStats {
    pub entries_added: usize,
    /// Mean of the keypoint/joint tracking kernels over collected steps.
    pub mean_quality: f64,
    pub mean_rel_disp_error: f64,
    pub resets: usize,
}

/// DAgger collection: the policy acts, the teacher labels every visited
/// state, and the buffer grows by `envs.len() * horizon` entries (FIFO
/// capped).
#[allow(clippy::too_many_arguments)]
pub fn collect(
    envs: &mut [ToyEnv],
    tasks: &mut [TaskState],
    policy: RolloutPolicy,
    teacher: TeacherFn,
    library: &MotionLibrary,
    embeddings: &[TextEmbedding],
    buffer: &mut ExperienceBuffer,
    config: &CollectConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CollectStats> {
    if envs.len() != tasks.len() {
        return Err(Error::invalid("envs/tasks length mismatch"));
    }
    let mut stats = CollectStats::default();
    let mut quality_acc = 0.0;
    let mut rel_acc = 0.0;
    let mut rel_count = 0usize;

    for _ in 0..config.horizon {
        for (env, task) in envs.iter_mut().zip(tasks.iter_mut()) {
            let clip = &library.clips[task.clip];
            let obs = env.observe();
            task.history.push(&obs, &task.prev_action);
            let flat = task.history.flatten();

            let window = clip.reference_window(task.cursor);
            let label = teacher(env.state(), &window, env.privileged())?;
            let action = match &policy {
                RolloutPolicy::Student(student) => student.act(&flat, &task.text, &obs)?,
                RolloutPolicy::Teacher => label.clone(),
            };

            buffer.push(TrainSample {
                obs_history: flat,
                text: task.text.clone(),
                obs,
                target_action: label,
            });
            stats.entries_added += 1;

            // Tracking quality of the current state against the reference.
            let poses = env.model().forward_kinematics(&env.state().joint_pos)?;
            let keypoints: Vec<Vector3<f64>> = poses.iter().map(|p| p.position).collect();
            let frame = &clip.frames[clip.wrap(task.cursor)];
            quality_acc += 0.5 * metrics::keypoint_kernel(&keypoints, &frame.keypoints)
                + 0.5 * metrics::joint_kernel(&env.state().joint_pos, &frame.joints);

            // Step the plant with the base following the reference root.
            env.set_base_command(clip.root_velocity(task.cursor), 0.0);
            env.step(&action)?;
            task.prev_action = action;

            // Relative-displacement check over the configured interval.
            let root = Vector3::new(env.state().base_pos.x, env.state().base_pos.y, 0.0);
            let ref_root = frame.root_pos;
            task.root_window.push_back(root);
            task.ref_root_window.push_back(ref_root);
            if task.root_window.len() > config.rel_disp_steps + 1 {
                task.root_window.pop_front();
                task.ref_root_window.pop_front();
            }
            if task.root_window.len() == config.rel_disp_steps + 1 {
                let err = relative_displacement_error(
                    task.root_window.back().unwrap(),
                    task.root_window.front().unwrap(),
                    task.ref_root_window.back().unwrap(),
                    task.ref_root_window.front().unwrap(),
                );
                rel_acc += err;
                rel_count += 1;
                if err > config.rel_disp_threshold {
                    let clip_idx = task.clip;
                    task.assign(clip_idx, &embeddings[clip_idx], env, rng.random());
                    stats.resets += 1;
                    continue;
                }
            }
            task.cursor += 1;
        }
    }

    if stats.entries_added > 0 {
        stats.mean_quality = quality_acc / stats.entries_added as f64;
    }
    if rel_count > 0 {
        stats.mean_rel_disp_error = rel_acc / rel_count as f64;
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// DAgger loop configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DAggerConfig {
    pub env_count: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub learning_rate: f64,
    pub epochs_per_iteration: usize,
    pub lambda_kl: f64,
    pub seed: u64,
    pub collect: CollectConfig,
    pub curriculum: CurriculumConfig,
    /// Stop early once imitation MSE falls to this fraction of the
    /// first-iteration MSE.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_mse_ratio: Option<f64>,
}

impl Default for DAggerConfig {
    fn default() -> Self {
        DAggerConfig {
            env_count: 64,
            iterations: 1000,
            batch_size: 1024 * 64,
            buffer_capacity: 1024 * 512,
            learning_rate: 1e-5,
            epochs_per_iteration: 1,
            lambda_kl: 1e-3,
            seed: 0,
            collect: CollectConfig::default(),
            curriculum: CurriculumConfig::default(),
            stop_mse_ratio: None,
        }
    }
}

impl DAggerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.env_count >= 1
            && self.iterations >= 1
            && self.batch_size >= 1
            && self.buffer_capacity >= 1
            && self.learning_rate > 0.0
            && self.epochs_per_iteration >= 1
            && self.lambda_kl >= 0.0
            && self.collect.horizon >= 1
            && self.collect.rel_disp_steps >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::validation("DAgger config values must be positive"))
        }
    }
}

/// One point of the training curve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainCurvePoint {
    pub iteration: usize,
    pub imitation_mse: f64,
    pub kl: f64,
    pub quality: f64,
    pub active_motions: usize,
    pub buffer_len: usize,
}

/// Run the distillation loop: collect with the student acting, label with
/// the teacher, update on shuffled buffer passes, and unlock harder motions
/// as the running tracking quality improves. Deterministic for a fixed seed.
pub fn dagger_train(
    config: &DAggerConfig,
    library: &MotionLibrary,
    envs: &mut [ToyEnv],
    student: &mut Student,
    teacher: TeacherFn,
) -> Result<Vec<TrainCurvePoint>> {
    config.validate()?;
    if envs.is_empty() || envs.len() != config.env_count {
        return Err(Error::invalid(format!(
            "expected {} environments, got {}",
            config.env_count,
            envs.len()
        )));
    }
    let n_joints = envs[0].joint_count();
    library.validate(n_joints)?;
    student.hyper.lr = config.learning_rate;
    if student.kind == StudentKind::Cvae {
        student.config.lambda_kl = config.lambda_kl;
    }

    let embeddings: Vec<TextEmbedding> = library
        .clips
        .iter()
        .map(|c| textenc::embed_text(&c.caption))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut buffer = ExperienceBuffer::new(config.buffer_capacity);
    let mut tasks: Vec<TaskState> = (0..envs.len())
        .map(|_| TaskState::new(&student.config, n_joints))
        .collect();

    let mut curve: Vec<TrainCurvePoint> = Vec::with_capacity(config.iterations);
    let mut active: Vec<usize> = Vec::new();
    let mut first_mse: Option<f64> = None;

    for iteration in 0..config.iterations {
        // Progress: running mean of collection quality over the window.
        let window = config.curriculum.window.max(1);
        let progress = if curve.is_empty() {
            0.0
        } else {
            let tail = &curve[curve.len().saturating_sub(window)..];
            (tail.iter().map(|p| p.quality).sum::<f64>() / tail.len() as f64).clamp(0.0, 1.0)
        };
        let new_active = curriculum_schedule(library, progress, config.curriculum.unlock_threshold)?;
        let assignments_changed = new_active != active;
        active = new_active;

        for (i, (env, task)) in envs.iter_mut().zip(tasks.iter_mut()).enumerate() {
            let desired = active[i % active.len()];
            if iteration == 0 || (assignments_changed && task.clip != desired) {
                task.assign(desired, &embeddings[desired], env, rng.random());
            }
        }

        let stats = collect(
            envs,
            tasks.as_mut_slice(),
            RolloutPolicy::Student(student),
            teacher,
            library,
            &embeddings,
            &mut buffer,
            &config.collect,
            &mut rng,
        )?;

        // One (or more) epochs over the shuffled buffer.
        let mut mse_acc = 0.0;
        let mut kl_acc = 0.0;
        let mut updates = 0usize;
        for _ in 0..config.epochs_per_iteration {
            let mut order: Vec<usize> = (0..buffer.len()).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            for chunk in order.chunks(config.batch_size) {
                let batch: Vec<TrainSample> =
                    chunk.iter().map(|&i| buffer.get(i).clone()).collect();
                let stats = student.train_batch(&batch, &mut rng)?;
                mse_acc += stats.reconstruction;
                kl_acc += stats.kl;
                updates += 1;
            }
        }
        let imitation_mse = mse_acc / updates.max(1) as f64;
        let kl = kl_acc / updates.max(1) as f64;
        curve.push(TrainCurvePoint {
            iteration,
            imitation_mse,
            kl,
            quality: stats.mean_quality,
            active_motions: active.len(),
            buffer_len: buffer.len(),
        });

        let first = *first_mse.get_or_insert(imitation_mse);
        if let Some(ratio) = config.stop_mse_ratio {
            if imitation_mse <= ratio * first && iteration > 0 {
                break;
            }
        }
    }
    Ok(curve)
}

// ---------------------------------------------------------------------------
// Rollouts, interpolation, latent dumping
// ---------------------------------------------------------------------------

/// One logged control step.
#[derive(Debug, Clone)]
pub struct RolloutFrame {
    pub step: usize,
    pub time: f64,
    pub command: String,
    pub alpha: Option<f64>,
    pub state: metrics::RobotState,
    pub reference: ReferenceFrame,
    pub action: DVector<f64>,
    pub latent_mu: Option<DVector<f64>>,
}

struct RolloutEngine<'a> {
    student: &'a Student,
    env: &'a mut ToyEnv,
    task: TaskState,
    reference: Option<(usize, &'a MotionLibrary)>,
    prev_vel: DVector<f64>,
}

impl<'a> RolloutEngine<'a> {
    /// Switch the logged reference clip, re-anchoring its cursor. The plant
    /// keeps running; nothing else resets.
    fn set_reference(&mut self, reference: Option<(usize, &'a MotionLibrary)>) {
        self.reference = reference;
        self.task.cursor = 0;
    }
}

impl<'a> RolloutEngine<'a> {
    fn new(
        student: &'a Student,
        env: &'a mut ToyEnv,
        reference: Option<(usize, &'a MotionLibrary)>,
        seed: u64,
    ) -> Result<Self> {
        let n = env.joint_count();
        let mut task = TaskState::new(&student.config, n);
        env.reset(seed);
        let obs = env.observe();
        task.history.reset(&obs, &task.prev_action);
        Ok(RolloutEngine {
            student,
            env,
            task,
            reference,
            prev_vel: DVector::zeros(n),
        })
    }

    /// Advance one step under a latent chosen by `blend`, recording a frame.
    fn step(
        &mut self,
        step: usize,
        command: &str,
        text_a: &DVector<f64>,
        blend: Option<(&DVector<f64>, f64)>,
        record_latent: bool,
    ) -> Result<RolloutFrame> {
        let obs = self.env.observe();
        self.task.history.push(&obs, &self.task.prev_action);
        let flat = self.task.history.flatten();

        let (action, alpha, latent) = match (&self.student.arch, blend) {
            // Plain students act directly; latent blending needs the CVAE.
            (StudentArch::Mlp(_), None) => (self.student.act(&flat, text_a, &obs)?, None, None),
            (StudentArch::Mlp(_), Some(_)) => {
                return Err(Error::validation(
                    "latent interpolation requires the CVAE architecture",
                ))
            }
            (StudentArch::Cvae(_), blend) => {
                let mu_a = self.student.encode_mean(&flat, text_a)?;
                let (z, alpha) = match blend {
                    None => (mu_a, None),
                    Some((_, a)) if a == 0.0 => (mu_a, Some(0.0)),
                    Some((text_b, a)) => {
                        let mu_b = self.student.encode_mean(&flat, text_b)?;
                        if a == 1.0 {
                            (mu_b, Some(1.0))
                        } else {
                            (mu_a * (1.0 - a) + mu_b * a, Some(a))
                        }
                    }
                };
                let action = self.student.decode_action(&z, &obs)?;
                (action, alpha, record_latent.then(|| z))
            }
        };

        let reference = match self.reference {
            Some((clip_idx, library)) => {
                let clip = &library.clips[clip_idx];
                self.env.set_base_command(clip.root_velocity(self.task.cursor), 0.0);
                let feet: Vec<usize> = self
                    .env
                    .model()
                    .foot_keypoints
                    .iter()
                    .filter_map(|n| self.env.model().keypoint_index(n))
                    .collect();
                clip.reference_frame(self.task.cursor, &feet)
            }
            None => {
                self.env.set_base_command(Vector2::zeros(), 0.0);
                let poses = self.env.model().forward_kinematics(&self.env.state().joint_pos)?;
                ReferenceFrame {
                    keypoints: poses.iter().map(|p| p.position).collect(),
                    joint_pos: self.env.state().joint_pos.clone(),
                    feet_height_diff: 0.0,
                    stance_duration: 0.0,
                }
            }
        };

        let vel_before = self.env.state().joint_vel.clone();
        self.env.step(&action)?;
        let joint_acc = (&self.env.state().joint_vel - &vel_before) / crate::sim::DT;
        self.prev_vel = vel_before;

        let state = self
            .env
            .full_state(&self.task.prev_action, &action, &joint_acc)?;
        let frame = RolloutFrame {
            step,
            time: self.env.state().time,
            command: command.to_owned(),
            alpha,
            state,
            reference,
            action: action.clone(),
            latent_mu: latent,
        };
        self.task.prev_action = action;
        self.task.cursor += 1;
        Ok(frame)
    }
}

/// Roll the student for `horizon` steps under a single text command,
/// optionally logging reference frames from a library clip.
pub fn policy_rollout(
    student: &Student,
    env: &mut ToyEnv,
    command: &str,
    reference: Option<(usize, &MotionLibrary)>,
    horizon: usize,
    seed: u64,
    record_latents: bool,
) -> Result<Vec<RolloutFrame>> {
    let text = textenc::embed_text(command)?.into_vector();
    let mut engine = RolloutEngine::new(student, env, reference, seed)?;
    (0..horizon)
        .map(|step| engine.step(step, command, &text, None, record_latents))
        .collect()
}

/// Roll a timed command script continuously: the plant never resets between
/// commands, each command's embedding is computed once and reused for its
/// whole duration, and each command runs for `duration / dt` control steps.
/// With a library, each command logs reference frames from its
/// nearest-caption clip.
pub fn script_rollout(
    student: &Student,
    env: &mut ToyEnv,
    script: &textenc::CommandScript,
    library: Option<&MotionLibrary>,
    seed: u64,
) -> Result<Vec<RolloutFrame>> {
    if script.commands.is_empty() {
        return Err(Error::invalid("script has no commands"));
    }
    let mut engine = RolloutEngine::new(student, env, None, seed)?;
    let mut frames = Vec::new();
    let mut step = 0usize;
    for command in &script.commands {
        let text = textenc::embed_text(&command.text)?.into_vector();
        engine.set_reference(match library {
            Some(lib) => Some((lib.nearest_by_caption(&command.text)?, lib)),
            None => None,
        });
        let steps = (command.duration / crate::sim::DT).round() as usize;
        for _ in 0..steps {
            frames.push(engine.step(step, &command.text, &text, None, false)?);
            step += 1;
        }
    }
    Ok(frames)
}

/// Latent-space interpolation: one rollout per alpha, each from the same
/// reset seed, with per-step latents `(1 - alpha) mu_a + alpha mu_b`.
/// The endpoints take the pure-command code paths bit-exactly.
pub fn interpolate_rollout(
    student: &Student,
    env: &mut ToyEnv,
    text_a: &str,
    text_b: &str,
    alphas: &[f64],
    horizon: usize,
    seed: u64,
) -> Result<Vec<(f64, Vec<RolloutFrame>)>> {
    if alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::invalid("alpha values must lie in [0, 1]"));
    }
    let va = textenc::embed_text(text_a)?.into_vector();
    let vb = textenc::embed_text(text_b)?.into_vector();
    let label = format!("{text_a} ~ {text_b}");
    let mut out = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut engine = RolloutEngine::new(student, env, None, seed)?;
        let frames: Result<Vec<RolloutFrame>> = (0..horizon)
            .map(|step| engine.step(step, &label, &va, Some((&vb, alpha)), false))
            .collect();
        out.push((alpha, frames?));
    }
    Ok(out)
}

/// One latent row of a dump.
#[derive(Debug, Clone, Serialize)]
pub struct LatentRow {
    pub command: String,
    pub step: usize,
    pub mu: Vec<f64>,
}

/// Latent table plus its variance-maximizing 2-D linear projection.
#[derive(Debug, Clone, Serialize)]
pub struct LatentDump {
    pub rows: Vec<LatentRow>,
    /// The two projection directions (rows of the projection matrix).
    pub components: [Vec<f64>; 2],
    /// Fraction of total variance captured by the two components.
    pub variance_fraction: f64,
    /// `(command, step, x, y)` per row.
    pub projected: Vec<(String, usize, f64, f64)>,
}

/// Roll out each command, record the per-step mean latents, and project them
/// onto the top two principal directions.
pub fn dump_latents(
    student: &Student,
    env: &mut ToyEnv,
    commands: &[String],
    horizon: usize,
    seed: u64,
) -> Result<LatentDump> {
    if commands.is_empty() {
        return Err(Error::invalid("no commands to dump"));
    }
    let mut rows: Vec<LatentRow> = Vec::new();
    for command in commands {
        let frames = policy_rollout(student, env, command, None, horizon, seed, true)?;
        for f in frames {
            rows.push(LatentRow {
                command: command.clone(),
                step: f.step,
                mu: f.latent_mu.expect("latents recorded").iter().copied().collect(),
            });
        }
    }
    let d = student.config.latent_dim;
    let m = rows.len();
    let mut mean = DVector::zeros(d);
    for r in &rows {
        mean += DVector::from_vec(r.mu.clone());
    }
    mean /= m as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in &rows {
        let x = DVector::from_vec(r.mu.clone()) - &mean;
        cov += &x * x.transpose();
    }
    cov /= (m.max(2) - 1) as f64;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let top2: f64 = order
        .iter()
        .take(2)
        .map(|&i| eig.eigenvalues[i].max(0.0))
        .sum();
    let variance_fraction = if total > 0.0 {
        (top2 / total).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let c0 = eig.eigenvectors.column(order[0]).into_owned();
    let c1 = if d > 1 {
        eig.eigenvectors.column(order[1]).into_owned()
    } else {
        DVector::zeros(d)
    };
    let projected = rows
        .iter()
        .map(|r| {
            let x = DVector::from_vec(r.mu.clone()) - &mean;
            (r.command.clone(), r.step, c0.dot(&x), c1.dot(&x))
        })
        .collect();
    Ok(LatentDump {
        rows,
        components: [c0.iter().copied().collect(), c1.iter().copied().collect()],
        variance_fraction,
        projected,
    })
}
