//! Shared fixtures for CLI and acceptance tests: a small mirrored humanoid,
//! self-consistent motion targets, a two-clip motion library, and a compact
//! training configuration.

#![allow(dead_code)]

use std::path::Path;

use nalgebra::{DVector, Vector3};

use wholebody_core::cvae::CvaeConfig;
use wholebody_core::distill::{
    CollectConfig, CurriculumConfig, DAggerConfig, MotionClip, MotionFrame, MotionLibrary,
};
use wholebody_core::io::{
    MotionLibraryFile, MotionTargetsFile, TargetFrameJson, TrainFile, SCHEMA_VERSION,
};
use wholebody_core::metrics::Difficulty;
use wholebody_core::sim::{observation_dim, DynamicsParams, RandomizationConfig};
use wholebody_core::textenc;
use wholebody_core::RobotModel;

/// An 8-joint mirrored toy humanoid: torso pitch/roll, two 2-joint arms, and
/// two hip joints, with hand/foot/head keypoints.
pub fn toy_humanoid_json() -> &'static str {
    r#"{
        "joints": [
            {"name":"torso_pitch","parent":-1,"offset":[0,0,0.8],"axis":[0,1,0],"limits":[-1.0,1.0]},
            {"name":"torso_roll","parent":0,"offset":[0,0,0.1],"axis":[1,0,0],"limits":[-0.8,0.8]},
            {"name":"l_shoulder","parent":1,"offset":[0,0.25,0.3],"axis":[0,1,0],"limits":[-2.0,2.0]},
            {"name":"l_elbow","parent":2,"offset":[0,0.05,-0.25],"axis":[0,1,0],"limits":[-2.2,2.2]},
            {"name":"r_shoulder","parent":1,"offset":[0,-0.25,0.3],"axis":[0,1,0],"limits":[-2.0,2.0]},
            {"name":"r_elbow","parent":4,"offset":[0,-0.05,-0.25],"axis":[0,1,0],"limits":[-2.2,2.2]},
            {"name":"l_hip","parent":-1,"offset":[0,0.12,0.75],"axis":[0,1,0],"limits":[-1.5,1.5]},
            {"name":"r_hip","parent":-1,"offset":[0,-0.12,0.75],"axis":[0,1,0],"limits":[-1.5,1.5]}
        ],
        "keypoints": [
            {"name":"l_hand","joint":3,"offset":[0,0,-0.25]},
            {"name":"r_hand","joint":5,"offset":[0,0,-0.25]},
            {"name":"l_foot","joint":6,"offset":[0,0,-0.75]},
            {"name":"r_foot","joint":7,"offset":[0,0,-0.75]},
            {"name":"head","joint":1,"offset":[0,0,0.35]}
        ],
        "end_effectors": ["l_hand", "r_hand"],
        "mirror_map": [
            {"a":"torso_pitch","b":"torso_pitch","sign":1},
            {"a":"torso_roll","b":"torso_roll","sign":-1},
            {"a":"l_shoulder","b":"r_shoulder","sign":1},
            {"a":"l_elbow","b":"r_elbow","sign":1},
            {"a":"l_hip","b":"r_hip","sign":1}
        ],
        "default_pose": [0.0, 0.0, 0.1, 0.2, 0.1, 0.2, 0.0, 0.0],
        "hip_joints": ["l_hip", "r_hip"],
        "leg_joints": ["l_hip", "r_hip"],
        "foot_keypoints": ["l_foot", "r_foot"]
    }"#
}

pub fn toy_humanoid() -> RobotModel {
    RobotModel::from_json(toy_humanoid_json()).unwrap()
}

/// A smooth in-limits joint trajectory for the toy humanoid.
pub fn smooth_trajectory(model: &RobotModel, frames: usize, seed_phase: f64) -> Vec<DVector<f64>> {
    let n = model.joint_count();
    (0..frames)
        .map(|t| {
            let phase = t as f64 / frames as f64 * std::f64::consts::TAU + seed_phase;
            let q = DVector::from_fn(n, |i, _| {
                0.15 * (phase + i as f64 * 0.9).sin() + 0.1 * (2.0 * phase + i as f64).cos()
            });
            model.clamp_to_limits(&q)
        })
        .collect()
}

/// Motion targets generated by forward kinematics of a known trajectory.
pub fn targets_from_trajectory(
    model: &RobotModel,
    trajectory: &[DVector<f64>],
    with_rotations: bool,
) -> MotionTargetsFile {
    let ee = model.end_effector_indices();
    MotionTargetsFile {
        schema_version: SCHEMA_VERSION.into(),
        fps: 50.0,
        keypoints: model.keypoints.iter().map(|k| k.name.clone()).collect(),
        frames: trajectory
            .iter()
            .map(|q| {
                let poses = model.forward_kinematics(q).unwrap();
                TargetFrameJson {
                    positions: poses
                        .iter()
                        .map(|p| [p.position.x, p.position.y, p.position.z])
                        .collect(),
                    rotations: with_rotations.then(|| {
                        ee.iter()
                            .map(|&k| {
                                let r = poses[k].rotation;
                                [
                                    r[(0, 0)],
                                    r[(0, 1)],
                                    r[(0, 2)],
                                    r[(1, 0)],
                                    r[(1, 1)],
                                    r[(1, 2)],
                                    r[(2, 0)],
                                    r[(2, 1)],
                                    r[(2, 2)],
                                ]
                            })
                            .collect()
                    }),
                }
            })
            .collect(),
    }
}

/// Build one library clip from a joint trajectory.
pub fn clip_from_joints(
    model: &RobotModel,
    name: &str,
    caption: &str,
    joints: Vec<DVector<f64>>,
    root_speed: f64,
    label: Difficulty,
) -> MotionClip {
    let frames = joints
        .into_iter()
        .enumerate()
        .map(|(t, q)| {
            let keypoints = model
                .forward_kinematics(&q)
                .unwrap()
                .iter()
                .map(|p| p.position)
                .collect();
            MotionFrame {
                joints: q,
                keypoints,
                root_pos: Vector3::new(root_speed * t as f64 / 50.0, 0.0, 0.0),
            }
        })
        .collect();
    MotionClip {
        name: name.into(),
        caption: caption.into(),
        fps: 50.0,
        frames,
        label,
    }
}

/// The two-clip benchmark library: a quasi-static right-hand wave (Easy) and
/// a brisk forward walk (Hard).
pub fn benchmark_library(model: &RobotModel) -> MotionLibrary {
    let n = model.joint_count();
    let default = model.default_configuration();

    let wave: Vec<DVector<f64>> = (0..100)
        .map(|t| {
            let phase = t as f64 / 100.0 * std::f64::consts::TAU;
            let mut q = default.clone();
            q[4] += 0.5 * phase.sin(); // r_shoulder
            q[5] += 0.3 * (phase + 0.7).sin(); // r_elbow
            model.clamp_to_limits(&q)
        })
        .collect();

    let walk: Vec<DVector<f64>> = (0..100)
        .map(|t| {
            let phase = t as f64 / 100.0 * 2.0 * std::f64::consts::TAU;
            let mut q = default.clone();
            q[6] += 0.4 * phase.sin(); // l_hip
            q[7] -= 0.4 * phase.sin(); // r_hip
            q[2] -= 0.2 * phase.sin(); // arms counter-swing
            q[4] += 0.2 * phase.sin();
            q[0] += 0.05 * (2.0 * phase).sin();
            model.clamp_to_limits(&q)
        })
        .collect();

    let library = MotionLibrary {
        clips: vec![
            clip_from_joints(
                model,
                "wave",
                "a person waves the right hand",
                wave,
                0.0,
                Difficulty::Easy,
            ),
            clip_from_joints(
                model,
                "walk",
                "a person walks forward briskly",
                walk,
                1.2,
                Difficulty::Hard,
            ),
        ],
    };
    library.validate(n).unwrap();
    library
}

/// Compact student dimensions for desk-scale training on the toy humanoid.
pub fn benchmark_cvae_config(model: &RobotModel) -> CvaeConfig {
    let n = model.joint_count();
    CvaeConfig {
        obs_dim: observation_dim(n),
        action_dim: n,
        history_len: 5,
        history_stride: 5,
        include_past_actions: true,
        text_dim: textenc::EMBED_DIM,
        latent_dim: 8,
        encoder_hidden: vec![64, 32],
        decoder_hidden: vec![32, 64],
        lambda_kl: 1e-5,
        log_sigma_clamp: [-5.0, 2.0],
        log_sigma_init: -3.0,
    }
}

/// The fixed toy benchmark loop configuration: 64 environments, two motions.
pub fn benchmark_dagger_config(seed: u64, iterations: usize) -> DAggerConfig {
    DAggerConfig {
        env_count: 64,
        iterations,
        batch_size: 256,
        buffer_capacity: 4096,
        learning_rate: 2e-3,
        epochs_per_iteration: 1,
        lambda_kl: 1e-5,
        seed,
        collect: CollectConfig {
            horizon: 4,
            rel_disp_steps: 5,
            rel_disp_threshold: 0.25,
        },
        curriculum: CurriculumConfig {
            unlock_threshold: 0.8,
            window: 50,
        },
        stop_mse_ratio: None,
    }
}

pub fn write_model(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("robot.json");
    std::fs::write(&path, toy_humanoid_json()).unwrap();
    path
}

pub fn write_targets(dir: &Path, model: &RobotModel, frames: usize) -> std::path::PathBuf {
    let trajectory = smooth_trajectory(model, frames, 0.3);
    let targets = targets_from_trajectory(model, &trajectory, false);
    let path = dir.join("targets.json");
    targets.save(&path).unwrap();
    path
}

pub fn write_library(dir: &Path, model: &RobotModel) -> std::path::PathBuf {
    let library = benchmark_library(model);
    let path = dir.join("library.json");
    MotionLibraryFile::from_library(&library).save(&path).unwrap();
    path
}

pub fn write_train_config(dir: &Path, model: &RobotModel, iterations: usize) -> std::path::PathBuf {
    let file = TrainFile {
        schema_version: SCHEMA_VERSION.into(),
        student: wholebody_core::distill::StudentKind::Cvae,
        cvae: benchmark_cvae_config(model),
        dagger: benchmark_dagger_config(11, iterations),
        dynamics: DynamicsParams::default(),
        randomization: RandomizationConfig::defaults(),
    };
    let path = dir.join("train.json");
    file.save(&path).unwrap();
    path
}

pub fn write_script(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("script.txt");
    std::fs::write(
        &path,
        "A person walks forward briskly then stops: 4.0\nA man waves his right hand: 5.0\n",
    )
    .unwrap();
    path
}

/// Path to the built CLI binary.
pub fn wholebody_bin() -> &'static str {
    env!("CARGO_BIN_EXE_wholebody")
}
