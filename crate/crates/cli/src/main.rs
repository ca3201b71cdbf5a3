//! Command-line surface for the whole-body motion toolkit: retarget motions,
//! evaluate rollouts, distill the student, roll out command scripts,
//! interpolate latents, dump latent tables, and verify mirror specs.
//!
//! Exit codes: 0 success, 1 validation/usage error, 2 numerical failure.

use wholebody_cli::manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};
use nalgebra::DVector;

use manifest::RunManifest;
use wholebody_core::cvae::AdamHyper;
use wholebody_core::distill::{
    dagger_train, dump_latents, interpolate_rollout, script_rollout, Student,
};
use wholebody_core::io::{
    CheckpointFile, MotionLibraryFile, MotionTargetsFile, RetargetResultFile, TrainFile,
    SCHEMA_VERSION,
};
use wholebody_core::metrics::{
    gravity_tilt, motion_quality, reward_terms, stability, RewardModel, DEFAULT_FALL_TILT_RAD,
    TERM_NAMES,
};
use wholebody_core::sim::{
    observation_dim, observation_mirror_spec, teacher_oracle, DynamicsParams,
    RandomizationConfig, ToyEnv,
};
use wholebody_core::symmetry::{mirror_action, mirror_state, symmetry_loss, MirrorSpec};
use wholebody_core::textenc::parse_script;
use wholebody_core::{LMConfig, RobotModel};

#[derive(Parser)]
#[command(
    name = "wholebody",
    version,
    about = "Motion retargeting, tracking metrics, and CVAE student distillation at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve whole-sequence inverse-kinematics retargeting for a motion file.
    Retarget {
        /// Robot model JSON.
        #[arg(long)]
        model: PathBuf,
        /// Motion target file (keypoint trajectories).
        #[arg(long)]
        motion: PathBuf,
        /// Output trajectory JSON.
        #[arg(long)]
        out: PathBuf,
        /// Optional LM solver configuration JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Weight on squared orientation errors.
        #[arg(long, default_value_t = 1.0)]
        w_ori: f64,
        /// Weight on squared frame-difference smoothness.
        #[arg(long, default_value_t = 1e-4)]
        w_smooth: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a rollout log: per-term reward CSV plus a summary JSON.
    EvalMotion {
        /// Rollout log (JSON lines).
        #[arg(long)]
        rollout: PathBuf,
        /// Robot model JSON (limits, defaults, joint groups).
        #[arg(long)]
        model: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Stability horizon in steps; defaults to the rollout length.
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Distill the teacher into a student policy with the DAgger loop.
    TrainStudent {
        #[arg(long)]
        model: PathBuf,
        /// Motion library JSON (clips with captions and labels).
        #[arg(long)]
        library: PathBuf,
        /// Training configuration JSON.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (checkpoint, loss curve, manifest).
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the training configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Roll out a timed command script through a trained student.
    Rollout {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Script file: one `command: seconds` per line.
        #[arg(long)]
        script: PathBuf,
        /// Output rollout log (JSON lines).
        #[arg(long)]
        out: PathBuf,
        /// Optional library for nearest-caption reference logging.
        #[arg(long)]
        library: Option<PathBuf>,
        /// Apply the default domain-randomization table to the plant.
        #[arg(long)]
        randomize: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Blend two commands in latent space across a sweep of alphas.
    Interpolate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        text_a: String,
        #[arg(long)]
        text_b: String,
        /// Comma-separated blend coefficients in [0, 1].
        #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
        alphas: String,
        /// Steps per rollout.
        #[arg(long, default_value_t = 250)]
        steps: usize,
        /// Output rollout log (JSON lines, alpha per record).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump per-step latent means for a set of commands plus a 2-D
    /// variance-maximizing projection.
    DumpLatents {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Text file of commands, one per line (# comments allowed).
        #[arg(long)]
        commands: PathBuf,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Output directory (latents.csv, projection.json).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Verify mirror involutions and symmetrized-policy consistency.
    MirrorCheck {
        #[arg(long)]
        model: PathBuf,
        /// Mirror spec JSON; derived from the model and observation layout
        /// when absent.
        #[arg(long)]
        mirror: Option<PathBuf>,
        /// Report JSON path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        let numerical = err
            .chain()
            .any(|c| matches!(c.downcast_ref(), Some(wholebody_core::Error::Numerical(_))));
        std::process::exit(if numerical { 2 } else { 1 });
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Retarget {
            model,
            motion,
            out,
            config,
            w_ori,
            w_smooth,
            seed,
        } => cmd_retarget(&model, &motion, &out, config.as_deref(), w_ori, w_smooth, seed),
        Command::EvalMotion {
            rollout,
            model,
            out,
            horizon,
            seed,
        } => cmd_eval_motion(&rollout, &model, &out, horizon, seed),
        Command::TrainStudent {
            model,
            library,
            config,
            out,
            seed,
        } => cmd_train_student(&model, &library, &config, &out, seed),
        Command::Rollout {
            ckpt,
            model,
            script,
            out,
            library,
            randomize,
            seed,
        } => cmd_rollout(&ckpt, &model, &script, &out, library.as_deref(), randomize, seed),
        Command::Interpolate {
            ckpt,
            model,
            text_a,
            text_b,
            alphas,
            steps,
            out,
            seed,
        } => cmd_interpolate(&ckpt, &model, &text_a, &text_b, &alphas, steps, &out, seed),
        Command::DumpLatents {
            ckpt,
            model,
            commands,
            steps,
            out,
            seed,
        } => cmd_dump_latents(&ckpt, &model, &commands, steps, &out, seed),
        Command::MirrorCheck {
            model,
            mirror,
            out,
            seed,
        } => cmd_mirror_check(&model, mirror.as_deref(), &out, seed),
    }
}

fn cmd_retarget(
    model_path: &Path,
    motion_path: &Path,
    out: &Path,
    config_path: Option<&Path>,
    w_ori: f64,
    w_smooth: f64,
    seed: u64,
) -> anyhow::Result<()> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("retarget", seed);
    manifest.add_input(model_path)?;
    manifest.add_input(motion_path)?;

    let model = RobotModel::load(model_path).context("loading robot model")?;
    let targets = MotionTargetsFile::load(motion_path).context("loading motion targets")?;
    let lm_config = match config_path {
        Some(path) => {
            manifest.add_input(path)?;
            let config: LMConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            config
        }
        None => LMConfig::default(),
    };
    let problem = targets.to_problem(&model, w_ori, w_smooth)?;

    let solve_start = Instant::now();
    let result = wholebody_core::retarget_sequence(&model, &problem, &lm_config, None)?;
    manifest.timing("solve_ms", solve_start.elapsed().as_millis());

    RetargetResultFile::from_result(&targets, &result).save(out)?;
    manifest.add_output(out)?;
    manifest.extra_value(
        "mean_keypoint_error_m",
        result.mean_keypoint_error(&model, &problem).into(),
    );
    manifest.extra_value("iterations", result.iterations.into());
    manifest.extra_value(
        "final_objective",
        (*result.objective_history.last().unwrap()).into(),
    );
    manifest.timing("total_ms", start.elapsed().as_millis());
    manifest.write(out)?;
    println!(
        "retarget: {} frames, mean keypoint error {:.3e} m",
        result.trajectory.len(),
        result.mean_keypoint_error(&model, &problem)
    );
    Ok(())
}

fn cmd_eval_motion(
    rollout_path: &Path,
    model_path: &Path,
    out: &Path,
    horizon: Option<usize>,
    seed: u64,
) -> anyhow::Result<()> {
    let start = Instant::now();
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new("eval-motion", seed);
    manifest.add_input(rollout_path)?;
    manifest.add_input(model_path)?;

    let model = RobotModel::load(model_path)?;
    let reward_model = RewardModel::from_model(&model);
    let records = wholebody_core::io::read_rollout_jsonl(rollout_path)?;
    anyhow::ensure!(!records.is_empty(), "rollout log is empty");

    let mut rollout = Vec::with_capacity(records.len());
    for r in &records {
        rollout.push((r.state.to_state(), r.reference.to_reference()));
    }

    // Per-term CSV, one row per frame.
    let csv_path = out.join("per_term.csv");
    {
        let mut writer = csv::Writer::from_path(&csv_path)?;
        let mut header = vec!["step".to_owned()];
        header.extend(TERM_NAMES.iter().map(|n| n.to_string()));
        header.push("total".into());
        writer.write_record(&header)?;
        for (idx, (state, reference)) in rollout.iter().enumerate() {
            let terminated = gravity_tilt(&state.projected_gravity) > DEFAULT_FALL_TILT_RAD;
            let breakdown = reward_terms(&reward_model, state, reference, terminated)?;
            let mut row = vec![idx.to_string()];
            row.extend(breakdown.terms.iter().map(|t| format!("{:.17e}", t.weighted)));
            row.push(format!("{:.17e}", breakdown.total));
            writer.write_record(&row)?;
        }
        writer.flush()?;
    }

    let quality = motion_quality(&rollout)?;
    let states: Vec<_> = rollout.iter().map(|(s, _)| s.clone()).collect();
    let horizon = horizon.unwrap_or(states.len()).max(1);
    let stability_score = stability(&states, horizon, DEFAULT_FALL_TILT_RAD);

    let mut per_term_means = BTreeMap::new();
    for (idx, (state, reference)) in rollout.iter().enumerate() {
        let terminated = gravity_tilt(&state.projected_gravity) > DEFAULT_FALL_TILT_RAD;
        let breakdown = reward_terms(&reward_model, state, reference, terminated)?;
        for t in &breakdown.terms {
            *per_term_means.entry(t.name.to_string()).or_insert(0.0) += t.weighted;
        }
        let _ = idx;
    }
    for v in per_term_means.values_mut() {
        *v /= rollout.len() as f64;
    }

    let summary_path = out.join("summary.json");
    let summary = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "quality": quality,
        "stability": stability_score,
        "frames": rollout.len(),
        "per_term_means": per_term_means,
    });
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;

    manifest.add_output(&csv_path)?;
    manifest.add_output(&summary_path)?;
    manifest.extra_value("quality", quality.into());
    manifest.extra_value("stability", stability_score.into());
    manifest.timing("total_ms", start.elapsed().as_millis());
    manifest.write(out)?;
    println!("eval-motion: quality {quality:.4}, stability {stability_score:.4}");
    Ok(())
}

fn cmd_train_student(
    model_path: &Path,
    library_path: &Path,
    config_path: &Path,
    out: &Path,
    seed_override: Option<u64>,
) -> anyhow::Result<()> {
    let start = Instant::now();
    std::fs::create_dir_all(out)?;
    let mut train_file = TrainFile::load(config_path)?;
    if let Some(seed) = seed_override {
        train_file.dagger.seed = seed;
    }
    let mut manifest = RunManifest::new("train-student", train_file.dagger.seed);
    manifest.add_input(model_path)?;
    manifest.add_input(library_path)?;
    manifest.add_input(config_path)?;

    let model = RobotModel::load(model_path)?;
    let n = model.joint_count();
    anyhow::ensure!(
        train_file.cvae.obs_dim == observation_dim(n) && train_file.cvae.action_dim == n,
        "CVAE config dims must match the model: obs {} action {}",
        observation_dim(n),
        n
    );
    let library = MotionLibraryFile::load(library_path)?.to_library(n)?;

    let seed = train_file.dagger.seed;
    let mut envs: Vec<ToyEnv> = (0..train_file.dagger.env_count)
        .map(|i| {
            ToyEnv::new(
                model.clone(),
                train_file.dynamics,
                train_file.randomization.clone(),
                seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1)),
            )
        })
        .collect::<wholebody_core::Result<_>>()?;
    let mut student = Student::new(
        train_file.student,
        train_file.cvae.clone(),
        AdamHyper::with_lr(train_file.dagger.learning_rate),
        seed,
    )?;

    let train_start = Instant::now();
    let curve = dagger_train(
        &train_file.dagger,
        &library,
        &mut envs,
        &mut student,
        &teacher_oracle,
    )?;
    manifest.timing("train_ms", train_start.elapsed().as_millis());

    let ckpt_path = out.join("checkpoint.json");
    CheckpointFile::from_student(&student).save(&ckpt_path)?;

    let curve_path = out.join("loss_curve.csv");
    {
        let mut writer = csv::Writer::from_path(&curve_path)?;
        writer.write_record([
            "iteration",
            "imitation_mse",
            "kl",
            "quality",
            "active_motions",
            "buffer_len",
        ])?;
        for p in &curve {
            writer.write_record(&[
                p.iteration.to_string(),
                format!("{:.17e}", p.imitation_mse),
                format!("{:.17e}", p.kl),
                format!("{:.17e}", p.quality),
                p.active_motions.to_string(),
                p.buffer_len.to_string(),
            ])?;
        }
        writer.flush()?;
    }

    manifest.add_output(&ckpt_path)?;
    manifest.add_output(&curve_path)?;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        manifest.extra_value("first_imitation_mse", first.imitation_mse.into());
        manifest.extra_value("final_imitation_mse", last.imitation_mse.into());
        manifest.extra_value("iterations_run", curve.len().into());
    }
    manifest.timing("total_ms", start.elapsed().as_millis());
    manifest.write(out)?;
    println!(
        "train-student: {} iterations, final imitation MSE {:.3e}",
        curve.len(),
        curve.last().map(|p| p.imitation_mse).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn load_student_for_model(ckpt_path: &Path, model: &RobotModel) -> anyhow::Result<Student> {
    let student = CheckpointFile::load(ckpt_path)?.to_student()?;
    let n = model.joint_count();
    anyhow::ensure!(
        student.config.obs_dim == observation_dim(n) && student.config.action_dim == n,
        "checkpoint dims do not match the model"
    );
    Ok(student)
}

fn plant(model: &RobotModel, randomize: bool, seed: u64) -> anyhow::Result<ToyEnv> {
    let config = if randomize {
        RandomizationConfig::defaults()
    } else {
        RandomizationConfig::none()
    };
    Ok(ToyEnv::new(model.clone(), DynamicsParams::default(), config, seed)?)
}

fn cmd_rollout(
    ckpt_path: &Path,
    model_path: &Path,
    script_path: &Path,
    out: &Path,
    library_path: Option<&Path>,
    randomize: bool,
    seed: u64,
) -> anyhow::Result<()> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("rollout", seed);
    manifest.add_input(ckpt_path)?;
    manifest.add_input(model_path)?;
    manifest.add_input(script_path)?;

    let model = RobotModel::load(model_path)?;
    let student = load_student_for_model(ckpt_path, &model)?;
    let script = parse_script(&std::fs::read_to_string(script_path)?)?;
    anyhow::ensure!(!script.commands.is_empty(), "script has no commands");
    let library = match library_path {
        Some(path) => {
            manifest.add_input(path)?;
            Some(MotionLibraryFile::load(path)?.to_library(model.joint_count())?)
        }
        None => None,
    };

    let mut env = plant(&model, randomize, seed)?;
    let frames = script_rollout(&student, &mut env, &script, library.as_ref(), seed)?;
    wholebody_core::io::write_rollout_jsonl(out, &frames)?;

    manifest.add_output(out)?;
    manifest.extra_value("frames", frames.len().into());
    manifest.extra_value(
        "commands",
        script.commands.len().into(),
    );
    manifest.timing("total_ms", start.elapsed().as_millis());
    manifest.write(out)?;
    println!("rollout: {} frames over {} commands", frames.len(), script.commands.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_interpolate(
    ckpt_path: &Path,
    model_path: &Path,
    text_a: &str,
    text_b: &str,
    alphas: &str,
    steps: usize,
    out: &Path,
    seed: u64,
) -> anyhow::Result<()> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("interpolate", seed);
    manifest.add_input(ckpt_path)?;
    manifest.add_input(model_path)?;

    let alphas: Vec<f64> = alphas
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .context("parsing --alphas")?;
    let model = RobotModel::load(model_path)?;
    let student = load_student_for_model(ckpt_path, &model)?;
    let mut env = plant(&model, false, seed)?;
    let sweep = interpolate_rollout(&student, &mut env, text_a, text_b, &alphas, steps, seed)?;

    let mut all = Vec::new();
    for (_, frames) in &sweep {
        all.extend(frames.iter().cloned());
    }
    wholebody_core::io::write_rollout_jsonl(out, &all)?;

    manifest.add_output(out)?;
    manifest.extra_value("alphas", serde_json::to_value(&alphas)?);
    manifest.extra_value("steps_per_alpha", steps.into());
    manifest.timing("total_ms", start.elapsed().as_millis());
    manifest.write(out)?;
    println!("interpolate: {} alphas x {steps} steps", sweep.len());
    Ok(())
}

fn cmd_dump_latents(
    ckpt_path: &Path,
    model_path: &Path,
    commands_path: &Path,
    steps: usize,
    out: &Path,
    seed: u64,
) -> anyhow::Result<()> {
    let start = Instant::now();
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new("dump-latents", seed);
    manifest.add_input(ckpt_path)?;
    manifest.add_input(model_path)?;
    manifest.add_input(commands_path)?;

    let commands: Vec<String> = std::fs::read_to_string(commands_path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect();
    anyhow::ensure!(!commands.is_empty(), "no commands in {}", commands_path.display());

    let model = RobotModel::load(model_path)?;
    let student = load_student_for_model(ckpt_path, &model)?;
    let mut env = plant(&model, false, seed)?;
    let dump = dump_latents(&student, &mut env, &commands, steps, seed)?;

    let latents_path = out.join("latents.csv");
    {
        let mut writer = csv::Writer::from_path(&latents_path)?;
        let mut header = vec!["command".to_owned(), "step".to_owned()];
        header.extend((0..student.config.latent_dim).map(|i| format!("mu_{i}")));
        writer.write_record(&header)?;
        for row in &dump.rows {
            let mut record = vec![row.command.clone(), row.step.to_string()];
            record.extend(row.mu.iter().map(|v| format!("{v:.17e}")));
            writer.write_record(&record)?;
        }
        writer.flush()?;
    }

    let projection_path = out.join("projection.json");
    let projection = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "variance_fraction": dump.variance_fraction,
        "components": dump.components,
        "points": dump.projected.iter().map(|(command, step, x, y)| {
            serde_json::json!({ "command": command, "step": step, "x": x, "y": y })
        }).collect::<Vec<_>>(),
    });
    std::fs::write(&projection_path, serde_json::to_string_pretty(&projection)?)?;

    manifest.add_output(&latents_path)?;
    manifest.add_output(&projection_path)?;
    manifest.extra_value("rows", dump.rows.len().into());
    manifest.extra_value("variance_fraction", dump.variance_fraction.into());
    manifest.timing("total_ms", start.elapsed().as_millis());
    manifest.write(out)?;
    println!(
        "dump-latents: {} rows, 2-D projection keeps {:.1}% of variance",
        dump.rows.len(),
        dump.variance_fraction * 100.0
    );
    Ok(())
}

fn cmd_mirror_check(
    model_path: &Path,
    mirror_path: Option<&Path>,
    out: &Path,
    seed: u64,
) -> anyhow::Result<()> {
    use rand_chacha_shim::{seed_rng, uniform};
    let start = Instant::now();
    let mut manifest = RunManifest::new("mirror-check", seed);
    manifest.add_input(model_path)?;

    let model = RobotModel::load(model_path)?;
    let spec = match mirror_path {
        Some(path) => {
            manifest.add_input(path)?;
            MirrorSpec::from_json(&std::fs::read_to_string(path)?)?
        }
        None => observation_mirror_spec(&model)?,
    };
    spec.validate()?;

    let max_channel = spec
        .state_channels
        .iter()
        .flat_map(|p| [p.a, p.b])
        .max()
        .map_or(0, |m| m + 1);
    let state_dim = max_channel.max(observation_dim(model.joint_count()));
    let action_dim = model.joint_count();

    let mut rng = seed_rng(seed);
    let mut state_failures = 0usize;
    let mut action_failures = 0usize;
    for _ in 0..1000 {
        let s = DVector::from_fn(state_dim, |_, _| uniform(&mut rng));
        let twice = mirror_state(&mirror_state(&s, &spec)?, &spec)?;
        if twice != s {
            state_failures += 1;
        }
        let a = DVector::from_fn(action_dim, |_, _| uniform(&mut rng));
        let twice = mirror_action(&mirror_action(&a, &spec)?, &spec)?;
        if twice != a {
            action_failures += 1;
        }
    }

    // A random linear policy, explicitly symmetrized, must have zero loss.
    let w = nalgebra::DMatrix::from_fn(action_dim, state_dim, |_, _| uniform(&mut rng));
    let base = move |s: &DVector<f64>| &w * s;
    let spec_for_policy = spec.clone();
    let symmetrized = move |s: &DVector<f64>| {
        let direct = base(s);
        let mirrored = mirror_action(
            &base(&mirror_state(s, &spec_for_policy).unwrap()),
            &spec_for_policy,
        )
        .unwrap();
        (direct + mirrored) * 0.5
    };
    let batch: Vec<DVector<f64>> = (0..64)
        .map(|_| DVector::from_fn(state_dim, |_, _| uniform(&mut rng)))
        .collect();
    let loss = symmetry_loss(symmetrized, &batch, &spec)?;

    let passed = state_failures == 0 && action_failures == 0 && loss == 0.0;
    let report = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "state_involution_failures": state_failures,
        "action_involution_failures": action_failures,
        "symmetrized_policy_loss": loss,
        "checked_vectors": 1000,
        "passed": passed,
    });
    std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    manifest.add_output(out)?;
    manifest.timing("total_ms", start.elapsed().as_millis());
    manifest.write(out)?;

    println!(
        "mirror-check: involutions {}/{} ok, symmetrized loss {loss:.3e}",
        2000 - state_failures - action_failures,
        2000
    );
    anyhow::ensure!(passed, "mirror checks failed");
    Ok(())
}

/// Minimal deterministic RNG for the mirror-check command, avoiding a
/// direct rand dependency in the binary.
mod rand_chacha_shim {
    pub struct SplitMix(u64);

    pub fn seed_rng(seed: u64) -> SplitMix {
        SplitMix(seed)
    }

    pub fn uniform(rng: &mut SplitMix) -> f64 {
        rng.0 = rng.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = rng.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        ((z >> 11) as f64) * (1.0 / (1u64 << 53) as f64) * 2.0 - 1.0
    }
}
