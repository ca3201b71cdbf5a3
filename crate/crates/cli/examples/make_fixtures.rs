//! Generate a ready-to-run fixture set: a small mirrored humanoid model,
//! self-consistent motion targets, a two-clip motion library, a training
//! configuration, and a command script.
//!
//! Usage: `cargo run -p wholebody-cli --example make_fixtures -- <out-dir>`

use std::path::Path;

use nalgebra::{DVector, Vector3};
use wholebody_core::cvae::CvaeConfig;
use wholebody_core::distill::{
    CollectConfig, CurriculumConfig, DAggerConfig, MotionClip, MotionFrame, MotionLibrary,
    StudentKind,
};
use wholebody_core::io::{
    MotionLibraryFile, MotionTargetsFile, TargetFrameJson, TrainFile, SCHEMA_VERSION,
};
use wholebody_core::metrics::Difficulty;
use wholebody_core::sim::{observation_dim, DynamicsParams, RandomizationConfig};
use wholebody_core::textenc;
use wholebody_core::RobotModel;

const MODEL_JSON: &str = r#"{
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
}"#;

fn targets(model: &RobotModel, frames: usize) -> MotionTargetsFile {
    let n = model.joint_count();
    let trajectory: Vec<DVector<f64>> = (0..frames)
        .map(|t| {
            let phase = t as f64 / frames as f64 * std::f64::consts::TAU;
            let q = DVector::from_fn(n, |i, _| {
                0.15 * (phase + i as f64 * 0.9).sin() + 0.1 * (2.0 * phase + i as f64).cos()
            });
            model.clamp_to_limits(&q)
        })
        .collect();
    MotionTargetsFile {
        schema_version: SCHEMA_VERSION.into(),
        fps: 50.0,
        keypoints: model.keypoints.iter().map(|k| k.name.clone()).collect(),
        frames: trajectory
            .iter()
            .map(|q| TargetFrameJson {
                positions: model
                    .forward_kinematics(q)
                    .unwrap()
                    .iter()
                    .map(|p| [p.position.x, p.position.y, p.position.z])
                    .collect(),
                rotations: None,
            })
            .collect(),
    }
}

fn clip(
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

fn library(model: &RobotModel) -> MotionLibrary {
    let default = model.default_configuration();
    let wave = (0..100)
        .map(|t| {
            let phase = t as f64 / 100.0 * std::f64::consts::TAU;
            let mut q = default.clone();
            q[4] += 0.5 * phase.sin();
            q[5] += 0.3 * (phase + 0.7).sin();
            model.clamp_to_limits(&q)
        })
        .collect();
    let walk = (0..100)
        .map(|t| {
            let phase = t as f64 / 100.0 * 2.0 * std::f64::consts::TAU;
            let mut q = default.clone();
            q[6] += 0.4 * phase.sin();
            q[7] -= 0.4 * phase.sin();
            q[2] -= 0.2 * phase.sin();
            q[4] += 0.2 * phase.sin();
            q[0] += 0.05 * (2.0 * phase).sin();
            model.clamp_to_limits(&q)
        })
        .collect();
    MotionLibrary {
        clips: vec![
            clip(model, "wave", "a person waves the right hand", wave, 0.0, Difficulty::Easy),
            clip(model, "walk", "a person walks forward briskly", walk, 1.2, Difficulty::Hard),
        ],
    }
}

fn train_config(model: &RobotModel) -> TrainFile {
    let n = model.joint_count();
    TrainFile {
        schema_version: SCHEMA_VERSION.into(),
        student: StudentKind::Cvae,
        cvae: CvaeConfig {
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
        },
        dagger: DAggerConfig {
            env_count: 64,
            iterations: 300,
            batch_size: 256,
            buffer_capacity: 4096,
            learning_rate: 2e-3,
            epochs_per_iteration: 1,
            lambda_kl: 1e-5,
            seed: 0,
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
        },
        dynamics: DynamicsParams::default(),
        randomization: RandomizationConfig::defaults(),
    }
}

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "fixtures".into());
    let out = Path::new(&out);
    std::fs::create_dir_all(out)?;

    let model = RobotModel::from_json(MODEL_JSON)?;
    std::fs::write(out.join("robot.json"), MODEL_JSON)?;
    targets(&model, 100).save(&out.join("motion_targets.json"))?;
    MotionLibraryFile::from_library(&library(&model)).save(&out.join("library.json"))?;
    train_config(&model).save(&out.join("train_config.json"))?;
    std::fs::write(
        out.join("script.txt"),
        "A person walks forward briskly then stops: 4.0\nA man waves his right hand: 5.0\n",
    )?;
    std::fs::write(
        out.join("commands.txt"),
        "a person walks forward briskly\na person waves the right hand\n",
    )?;
    println!("wrote fixtures to {}", out.display());
    Ok(())
}
