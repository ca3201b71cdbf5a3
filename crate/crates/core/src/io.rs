//! Versioned file schemas: motion targets, retarget results, motion
//! libraries, rollout logs (JSON lines), student checkpoints, and the
//! training configuration.
//!
//! Every file carries `schema_version`; readers accept any minor revision of
//! major version 1 and reject other majors.

use nalgebra::{DVector, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::cvae::{CvaeConfig, CvaeParams, Layer, Mlp};
use crate::distill::{
    DAggerConfig, MotionClip, MotionFrame, MotionLibrary, RolloutFrame, Student, StudentArch,
    StudentKind,
};
use crate::error::{Error, Result};
use crate::metrics::{Difficulty, ReferenceFrame, RobotState};
use crate::model::RobotModel;
use crate::retarget::{RetargetProblem, RetargetResult, TargetFrame};
use crate::sim::{DynamicsParams, RandomizationConfig};

/// Schema version written into every output file.
pub const SCHEMA_VERSION: &str = "1.0";

/// Reject files whose major schema version is not 1.
pub fn check_schema_version(version: &str) -> Result<()> {
    let major = version
        .split('.')
        .next()
        .and_then(|v| v.parse::<u64>().ok())
        .ok_or_else(|| Error::validation(format!("malformed schema version `{version}`")))?;
    if major != 1 {
        return Err(Error::validation(format!(
            "unsupported schema major version {major} (expected 1)"
        )));
    }
    Ok(())
}

fn default_version() -> String {
    SCHEMA_VERSION.to_owned()
}

// ---------------------------------------------------------------------------
// Motion targets and retarget results
// ---------------------------------------------------------------------------

/// One frame of keypoint targets; rotations are row-major 3x3, one per model
/// end effector, present on all frames or none.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetFrameJson {
    pub positions: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotations: Option<Vec<[f64; 9]>>,
}

/// Keypoint target trajectories to retarget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionTargetsFile {
    #[serde(default = "default_version")]
    pub schema_version: String,
    pub fps: f64,
    /// Keypoint names, which must match the model's keypoints in order.
    pub keypoints: Vec<String>,
    pub frames: Vec<TargetFrameJson>,
}

impl MotionTargetsFile {
    pub fn load(path: &Path) -> Result<Self> {
        let file: MotionTargetsFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        check_schema_version(&file.schema_version)?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Convert to a retargeting problem, checking keypoint names against the
    /// model.
    pub fn to_problem(&self, model: &RobotModel, w_ori: f64, w_smooth: f64) -> Result<RetargetProblem> {
        let model_names: Vec<&str> = model.keypoints.iter().map(|k| k.name.as_str()).collect();
        let file_names: Vec<&str> = self.keypoints.iter().map(String::as_str).collect();
        if model_names != file_names {
            return Err(Error::validation(format!(
                "keypoint names {file_names:?} do not match model keypoints {model_names:?}"
            )));
        }
        let frames = self
            .frames
            .iter()
            .map(|f| TargetFrame {
                positions: f.positions.iter().map(|p| Vector3::from(*p)).collect(),
                rotations: f.rotations.as_ref().map(|rs| {
                    rs.iter()
                        .map(|r| Matrix3::from_row_slice(&r[..]))
                        .collect()
                }),
            })
            .collect();
        let problem = RetargetProblem {
            frames,
            w_ori,
            w_smooth,
        };
        problem.validate(model)?;
        Ok(problem)
    }
}

/// Solved joint trajectory mirroring the targets file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetargetResultFile {
    #[serde(default = "default_version")]
    pub schema_version: String,
    pub fps: f64,
    pub keypoints: Vec<String>,
    pub frames: Vec<ResultFrameJson>,
    pub objective_history: Vec<f64>,
    /// Per-frame keypoint RMSE (m).
    pub keypoint_rmse: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultFrameJson {
    pub joints: Vec<f64>,
}

impl RetargetResultFile {
    pub fn from_result(targets: &MotionTargetsFile, result: &RetargetResult) -> Self {
        RetargetResultFile {
            schema_version: SCHEMA_VERSION.to_owned(),
            fps: targets.fps,
            keypoints: targets.keypoints.clone(),
            frames: result
                .trajectory
                .iter()
                .map(|q| ResultFrameJson {
                    joints: q.iter().copied().collect(),
                })
                .collect(),
            objective_history: result.objective_history.clone(),
            keypoint_rmse: result.keypoint_rmse.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: RetargetResultFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        check_schema_version(&file.schema_version)?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Motion library
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionFrameJson {
    pub joints: Vec<f64>,
    pub keypoints: Vec<[f64; 3]>,
    #[serde(default)]
    pub root_pos: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionJson {
    pub name: String,
    pub caption: String,
    pub fps: f64,
    pub label: Difficulty,
    pub frames: Vec<MotionFrameJson>,
}

/// Library of reference motions with captions and difficulty labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionLibraryFile {
    #[serde(default = "default_version")]
    pub schema_version: String,
    pub motions: Vec<MotionJson>,
}

impl MotionLibraryFile {
    pub fn load(path: &Path) -> Result<Self> {
        let file: MotionLibraryFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        check_schema_version(&file.schema_version)?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn to_library(&self, joint_count: usize) -> Result<MotionLibrary> {
        let clips = self
            .motions
            .iter()
            .map(|m| MotionClip {
                name: m.name.clone(),
                caption: m.caption.clone(),
                fps: m.fps,
                label: m.label,
                frames: m
                    .frames
                    .iter()
                    .map(|f| MotionFrame {
                        joints: DVector::from_vec(f.joints.clone()),
                        keypoints: f.keypoints.iter().map(|p| Vector3::from(*p)).collect(),
                        root_pos: Vector3::from(f.root_pos),
                    })
                    .collect(),
            })
            .collect();
        let library = MotionLibrary { clips };
        library.validate(joint_count)?;
        Ok(library)
    }

    pub fn from_library(library: &MotionLibrary) -> Self {
        MotionLibraryFile {
            schema_version: SCHEMA_VERSION.to_owned(),
            motions: library
                .clips
                .iter()
                .map(|c| MotionJson {
                    name: c.name.clone(),
                    caption: c.caption.clone(),
                    fps: c.fps,
                    label: c.label,
                    frames: c
                        .frames
                        .iter()
                        .map(|f| MotionFrameJson {
                            joints: f.joints.iter().copied().collect(),
                            keypoints: f.keypoints.iter().map(|p| [p.x, p.y, p.z]).collect(),
                            root_pos: [f.root_pos.x, f.root_pos.y, f.root_pos.z],
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Rollout logs (JSON lines)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobotStateJson {
    pub root_lin_vel: [f64; 3],
    pub root_ang_vel: [f64; 3],
    pub projected_gravity: [f64; 3],
    pub joint_pos: Vec<f64>,
    pub joint_vel: Vec<f64>,
    pub joint_acc: Vec<f64>,
    pub joint_torque: Vec<f64>,
    pub prev_action: Vec<f64>,
    pub action: Vec<f64>,
    pub keypoints: Vec<[f64; 3]>,
    pub foot_contact_force: Vec<f64>,
    pub foot_vel_xy: Vec<[f64; 2]>,
}

impl From<&RobotState> for RobotStateJson {
    fn from(s: &RobotState) -> Self {
        let v3 = |v: &Vector3<f64>| [v.x, v.y, v.z];
        RobotStateJson {
            root_lin_vel: v3(&s.root_lin_vel),
            root_ang_vel: v3(&s.root_ang_vel),
            projected_gravity: v3(&s.projected_gravity),
            joint_pos: s.joint_pos.iter().copied().collect(),
            joint_vel: s.joint_vel.iter().copied().collect(),
            joint_acc: s.joint_acc.iter().copied().collect(),
            joint_torque: s.joint_torque.iter().copied().collect(),
            prev_action: s.prev_action.iter().copied().collect(),
            action: s.action.iter().copied().collect(),
            keypoints: s.keypoints.iter().map(|p| [p.x, p.y, p.z]).collect(),
            foot_contact_force: s.foot_contact_force.clone(),
            foot_vel_xy: s.foot_vel_xy.iter().map(|v| [v.x, v.y]).collect(),
        }
    }
}

impl RobotStateJson {
    pub fn to_state(&self) -> RobotState {
        RobotState {
            root_lin_vel: Vector3::from(self.root_lin_vel),
            root_ang_vel: Vector3::from(self.root_ang_vel),
            projected_gravity: Vector3::from(self.projected_gravity),
            joint_pos: DVector::from_vec(self.joint_pos.clone()),
            joint_vel: DVector::from_vec(self.joint_vel.clone()),
            joint_acc: DVector::from_vec(self.joint_acc.clone()),
            joint_torque: DVector::from_vec(self.joint_torque.clone()),
            prev_action: DVector::from_vec(self.prev_action.clone()),
            action: DVector::from_vec(self.action.clone()),
            keypoints: self.keypoints.iter().map(|p| Vector3::from(*p)).collect(),
            foot_contact_force: self.foot_contact_force.clone(),
            foot_vel_xy: self.foot_vel_xy.iter().map(|v| Vector2::new(v[0], v[1])).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceJson {
    pub keypoints: Vec<[f64; 3]>,
    pub joint_pos: Vec<f64>,
    pub feet_height_diff: f64,
    pub stance_duration: f64,
}

impl From<&ReferenceFrame> for ReferenceJson {
    fn from(r: &ReferenceFrame) -> Self {
        ReferenceJson {
            keypoints: r.keypoints.iter().map(|p| [p.x, p.y, p.z]).collect(),
            joint_pos: r.joint_pos.iter().copied().collect(),
            feet_height_diff: r.feet_height_diff,
            stance_duration: r.stance_duration,
        }
    }
}

impl ReferenceJson {
    pub fn to_reference(&self) -> ReferenceFrame {
        ReferenceFrame {
            keypoints: self.keypoints.iter().map(|p| Vector3::from(*p)).collect(),
            joint_pos: DVector::from_vec(self.joint_pos.clone()),
            feet_height_diff: self.feet_height_diff,
            stance_duration: self.stance_duration,
        }
    }
}

/// One line of a rollout log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub step: usize,
    pub time: f64,
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub state: RobotStateJson,
    pub reference: ReferenceJson,
    pub action: Vec<f64>,
}

impl From<&RolloutFrame> for RolloutRecord {
    fn from(f: &RolloutFrame) -> Self {
        RolloutRecord {
            step: f.step,
            time: f.time,
            command: f.command.clone(),
            alpha: f.alpha,
            state: RobotStateJson::from(&f.state),
            reference: ReferenceJson::from(&f.reference),
            action: f.action.iter().copied().collect(),
        }
    }
}

/// Write rollout frames as JSON lines, one frame per line, preceded by a
/// header line carrying the schema version.
pub fn write_rollout_jsonl(path: &Path, frames: &[RolloutFrame]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "{}",
        serde_json::json!({ "schema_version": SCHEMA_VERSION, "kind": "rollout" })
    )?;
    for frame in frames {
        writeln!(out, "{}", serde_json::to_string(&RolloutRecord::from(frame))?)?;
    }
    Ok(())
}

/// Read a JSON-lines rollout log back into records.
pub fn read_rollout_jsonl(path: &Path) -> Result<Vec<RolloutRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::validation("empty rollout file"))?;
    let header: serde_json::Value = serde_json::from_str(header)?;
    let version = header
        .get("schema_version")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::validation("rollout header missing schema_version"))?;
    check_schema_version(version)?;
    lines
        .map(|(idx, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                line: idx + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Student checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerJson {
    pub rows: usize,
    pub cols: usize,
    /// Row-major weights.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl From<&Layer> for LayerJson {
    fn from(l: &Layer) -> Self {
        let (rows, cols) = (l.w.nrows(), l.w.ncols());
        let mut w = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                w.push(l.w[(r, c)]);
            }
        }
        LayerJson {
            rows,
            cols,
            w,
            b: l.b.iter().copied().collect(),
        }
    }
}

impl LayerJson {
    fn to_layer(&self) -> Result<Layer> {
        if self.w.len() != self.rows * self.cols || self.b.len() != self.rows {
            return Err(Error::validation("layer tensor size mismatch"));
        }
        Ok(Layer {
            w: nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.w),
            b: DVector::from_vec(self.b.clone()),
        })
    }
}

/// CVAE tensors of a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvaeTensorsJson {
    pub trunk: Vec<LayerJson>,
    pub mu_head: LayerJson,
    pub log_sigma_head: LayerJson,
    pub decoder: Vec<LayerJson>,
}

/// Versioned student checkpoint: architecture kind, configuration header,
/// and layer tensors for whichever architecture the student uses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointFile {
    #[serde(default = "default_version")]
    pub schema_version: String,
    pub kind: StudentKind,
    pub config: CvaeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cvae: Option<CvaeTensorsJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp: Option<Vec<LayerJson>>,
}

impl CheckpointFile {
    pub fn from_student(student: &Student) -> Self {
        let (cvae, mlp) = match &student.arch {
            StudentArch::Cvae(params) => (
                Some(CvaeTensorsJson {
                    trunk: params.trunk.layers.iter().map(LayerJson::from).collect(),
                    mu_head: LayerJson::from(&params.mu_head),
                    log_sigma_head: LayerJson::from(&params.log_sigma_head),
                    decoder: params.decoder.layers.iter().map(LayerJson::from).collect(),
                }),
                None,
            ),
            StudentArch::Mlp(net) => (
                None,
                Some(net.layers.iter().map(LayerJson::from).collect()),
            ),
        };
        CheckpointFile {
            schema_version: SCHEMA_VERSION.to_owned(),
            kind: student.kind,
            config: student.config.clone(),
            cvae,
            mlp,
        }
    }

    /// Rebuild the student, validating tensor shapes against the config.
    pub fn to_student(&self) -> Result<Student> {
        check_schema_version(&self.schema_version)?;
        let arch = match (self.kind, &self.cvae, &self.mlp) {
            (StudentKind::Cvae, Some(tensors), None) => StudentArch::Cvae(CvaeParams {
                trunk: Mlp {
                    layers: tensors
                        .trunk
                        .iter()
                        .map(LayerJson::to_layer)
                        .collect::<Result<_>>()?,
                    output_elu: true,
                },
                mu_head: tensors.mu_head.to_layer()?,
                log_sigma_head: tensors.log_sigma_head.to_layer()?,
                decoder: Mlp {
                    layers: tensors
                        .decoder
                        .iter()
                        .map(LayerJson::to_layer)
                        .collect::<Result<_>>()?,
                    output_elu: false,
                },
            }),
            (StudentKind::Mlp, None, Some(layers)) => StudentArch::Mlp(Mlp {
                layers: layers.iter().map(LayerJson::to_layer).collect::<Result<_>>()?,
                output_elu: false,
            }),
            _ => {
                return Err(Error::validation(
                    "checkpoint tensors do not match the student kind",
                ))
            }
        };
        Student::from_arch(
            self.kind,
            self.config.clone(),
            arch,
            crate::cvae::AdamHyper::default(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        check_schema_version(&file.schema_version)?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

/// Everything `train-student` needs besides the robot model and library.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainFile {
    #[serde(default = "default_version")]
    pub schema_version: String,
    pub student: StudentKind,
    pub cvae: CvaeConfig,
    pub dagger: DAggerConfig,
    #[serde(default)]
    pub dynamics: DynamicsParams,
    #[serde(default = "RandomizationConfig::defaults")]
    pub randomization: RandomizationConfig,
}

impl TrainFile {
    pub fn load(path: &Path) -> Result<Self> {
        let file: TrainFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        check_schema_version(&file.schema_version)?;
        file.dagger.validate()?;
        file.cvae.validate()?;
        file.dynamics.validate()?;
        file.randomization.validate()?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
