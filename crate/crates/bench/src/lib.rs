//! Shared setup for the kernel benchmarks: a deterministic serial chain, a
//! self-consistent retargeting problem, and a small student network.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wholebody_core::cvae::{CvaeConfig, CvaeParams, TrainSample};
use wholebody_core::model::{Joint, Keypoint, RobotModel};
use wholebody_core::retarget::{RetargetProblem, TargetFrame};

/// A deterministic `n`-joint serial chain with mid and tip keypoints.
pub fn chain(n: usize) -> RobotModel {
    let axes = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let model = RobotModel {
        joints: (0..n)
            .map(|i| Joint {
                name: format!("j{i}"),
                parent: i as i64 - 1,
                offset: [0.05, -0.02, 0.25],
                axis: axes[i % 3],
                limits: [-2.0, 2.0],
            })
            .collect(),
        keypoints: vec![
            Keypoint {
                name: "mid".into(),
                joint: n / 2,
                offset: [0.1, 0.0, 0.1],
            },
            Keypoint {
                name: "tip".into(),
                joint: n - 1,
                offset: [0.0, 0.0, 0.2],
            },
        ],
        end_effectors: vec![],
        mirror_map: vec![],
        default_pose: None,
        hip_joints: vec![],
        leg_joints: vec![],
        foot_keypoints: vec![],
    };
    model.validate().unwrap();
    model
}

/// Self-consistent keypoint targets from a smooth joint trajectory.
pub fn fk_problem(model: &RobotModel, frames: usize) -> RetargetProblem {
    let n = model.joint_count();
    RetargetProblem {
        frames: (0..frames)
            .map(|t| {
                let s = t as f64 / frames as f64 * std::f64::consts::TAU;
                let q = DVector::from_fn(n, |i, _| 0.4 * (s + i as f64 * 0.7).sin());
                TargetFrame {
                    positions: model
                        .forward_kinematics(&q)
                        .unwrap()
                        .iter()
                        .map(|p| p.position)
                        .collect(),
                    rotations: None,
                }
            })
            .collect(),
        w_ori: 0.0,
        w_smooth: 1e-5,
    }
}

/// A small student network plus one training batch and its latent draws.
pub fn student_batch(
    batch_size: usize,
) -> (CvaeConfig, CvaeParams, Vec<TrainSample>, DMatrix<f64>) {
    let config = CvaeConfig {
        obs_dim: 25,
        action_dim: 8,
        history_len: 5,
        history_stride: 5,
        include_past_actions: true,
        text_dim: 512,
        latent_dim: 8,
        encoder_hidden: vec![64, 32],
        decoder_hidden: vec![32, 64],
        lambda_kl: 1e-4,
        log_sigma_clamp: [-5.0, 2.0],
        log_sigma_init: -2.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = CvaeParams::init(&config, &mut rng).unwrap();
    let batch = (0..batch_size)
        .map(|_| TrainSample {
            obs_history: DVector::from_fn(config.history_flat_dim(), |_, _| {
                rng.random_range(-1.0..1.0)
            }),
            text: DVector::from_fn(config.text_dim, |_, _| rng.random_range(-1.0..1.0)),
            obs: DVector::from_fn(config.obs_dim, |_, _| rng.random_range(-1.0..1.0)),
            target_action: DVector::from_fn(config.action_dim, |_, _| rng.random_range(-1.0..1.0)),
        })
        .collect();
    let eps = DMatrix::from_fn(config.latent_dim, batch_size, |_, _| {
        rng.random_range(-1.5..1.5)
    });
    (config, params, batch, eps)
}
