//! Numerical core for language-directed humanoid whole-body control at desk
//! scale: whole-sequence Levenberg-Marquardt motion retargeting, the
//! motion-tracking reward and metric suite, mirror-symmetry operators, a
//! conditional variational autoencoder student policy with hand-written
//! backpropagation, and DAgger teacher-student distillation against a toy
//! simulator with domain randomization.

pub mod cvae;
pub mod distill;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod retarget;
pub mod sim;
pub mod so3;
pub mod symmetry;
pub mod textenc;

pub use error::{Error, Result};
pub use model::{orientation_error, Joint, Keypoint, MirrorEntry, Pose, RobotModel};
pub use retarget::{
    build_jacobian, build_residuals, lm_step, retarget_sequence, smoothness_matrix,
    warm_start_trajectory, LMConfig, RetargetProblem, RetargetResult, SmoothnessMatrix,
    TargetFrame,
};
