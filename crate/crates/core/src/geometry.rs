//! Small SO(3) helpers for the 6-vector pose chart.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation vector (axis * angle) of a rotation, angle in [0, π].
pub fn rotation_vector(r: &UnitQuaternion<f64>) -> Vector3<f64> {
    r.scaled_axis()
}

pub fn from_rotation_vector(v: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*v)
}

/// Inverse of the left Jacobian of SO(3).
///
/// If `R = exp(phi)` and the spatial angular velocity is `w`, then
/// `d(phi)/dt = left_jacobian_inverse(phi) * w`.
pub fn left_jacobian_inverse(phi: &Vector3<f64>) -> Matrix3<f64> {
    let angle = phi.norm();
    let s = skew(phi);
    let s2 = s * s;
    let c = if angle < 1e-6 {
        // series of 1/a^2 - (1+cos a)/(2 a sin a)
        1.0 / 12.0 + angle * angle / 720.0
    } else {
        1.0 / (angle * angle) - (1.0 + angle.cos()) / (2.0 * angle * angle.sin())
    };
    Matrix3::identity() - 0.5 * s + c * s2
}

/// Fixed rotation from roll/pitch/yaw angles in degrees (applied as Rz(yaw)·Ry(pitch)·Rx(roll)).
pub fn rotation_from_rpy_deg(rpy: [f64; 3]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_euler_angles(
        rpy[0].to_radians(),
        rpy[1].to_radians(),
        rpy[2].to_radians(),
    )
}
