//! SO(3) utilities: exponential/logarithm maps and the inverse left Jacobian.
//!
//! Rotations are plain 3x3 orthonormal matrices throughout the crate. The
//! logarithm returns a rotation vector (axis times angle) whose norm is the
//! geodesic angle between the two frames.

use nalgebra::{Matrix3, Vector3};

/// Skew-symmetric (hat) matrix of a 3-vector: `hat(w) * v == w x v`.
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of `hat` for a skew-symmetric matrix.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues' formula: rotation matrix for a rotation vector.
pub fn exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    if theta < 1e-12 {
        return Matrix3::identity() + hat(w);
    }
    let axis = w / theta;
    let k = hat(&axis);
    Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
}

/// Rotation-vector logarithm of a rotation matrix.
///
/// Uses the stabilized branch near angle pi: the axis is recovered from the
/// symmetric part of `r`, where the antisymmetric part loses precision.
pub fn log(r: &Matrix3<f64>) -> Vector3<f64> {
    let trace = r.trace();
    let cos_theta = ((trace - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();

    let anti = vee(&((r - r.transpose()) * 0.5));

    if theta < 1e-7 {
        // sin(theta) ~ theta; vee already carries the first-order vector.
        return anti;
    }
    if theta < std::f64::consts::PI - 1e-4 {
        return anti * (theta / theta.sin());
    }

    // Near pi: (R + R^T)/2 = cos(theta) I + (1 - cos(theta)) a a^T.
    let sym = (r + r.transpose()) * 0.5;
    let outer = (sym - Matrix3::identity() * cos_theta) / (1.0 - cos_theta);
    let diag = Vector3::new(outer[(0, 0)], outer[(1, 1)], outer[(2, 2)]);
    let k = diag.imax();
    let mut axis = Vector3::new(outer[(0, k)], outer[(1, k)], outer[(2, k)]);
    axis /= axis.norm();
    // Orient the axis with whatever signal the antisymmetric part retains;
    // at exactly pi either sign is a valid logarithm.
    if anti.dot(&axis) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Inverse left Jacobian of SO(3) evaluated at rotation vector `phi`.
///
/// Maps a world-frame angular perturbation of the rotation to the resulting
/// perturbation of its logarithm; needed for analytic derivatives of
/// orientation residuals.
pub fn inv_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    if theta < 1e-6 {
        // Series: I - K/2 + K^2/12.
        return Matrix3::identity() - k * 0.5 + k * k * (1.0 / 12.0);
    }
    let half = 0.5 * theta;
    let cot = half.cos() / half.sin();
    let coeff = (1.0 - half * cot) / (theta * theta);
    Matrix3::identity() - k * 0.5 + k * k * coeff
}

/// Orthonormality defect `max(|R^T R - I|)`, used to validate inputs.
pub fn orthonormality_defect(r: &Matrix3<f64>) -> f64 {
    let d = r.transpose() * r - Matrix3::identity();
    d.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}
