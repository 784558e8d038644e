//! Small rotation-group helpers shared by the rasterizer, kinematics and
//! optimizer. Tangent vectors are axis-angle 3-vectors.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues exponential.
pub fn exp(omega: &Vec3) -> Mat3 {
    Rotation3::from_scaled_axis(*omega).into_inner()
}

pub fn log(r: &Mat3) -> Vec3 {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// Left Jacobian of SO(3): `exp(w + dw) ≈ exp(J_l(w) dw) exp(w)`.
pub fn left_jacobian(omega: &Vec3) -> Mat3 {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    if theta2 < 1e-10 {
        return Mat3::identity() + 0.5 * k + (1.0 / 6.0) * k * k;
    }
    let theta = theta2.sqrt();
    let a = (1.0 - theta.cos()) / theta2;
    let b = (theta - theta.sin()) / (theta2 * theta);
    Mat3::identity() + a * k + b * k * k
}

/// Right Jacobian: `exp(w + dw) ≈ exp(w) exp(J_r(w) dw)`.
pub fn right_jacobian(omega: &Vec3) -> Mat3 {
    left_jacobian(omega).transpose()
}

/// Axial vector of the antisymmetric part, scaled so that
/// `<G, [w]x B> = w . axial(B G^T)` holds for any matrices `G`, `B`.
pub fn axial(m: &Mat3) -> Vec3 {
    Vec3::new(
        m[(1, 2)] - m[(2, 1)],
        m[(2, 0)] - m[(0, 2)],
        m[(0, 1)] - m[(1, 0)],
    )
}

/// Quaternion `(w, x, y, z)` of a rotation matrix.
pub fn to_quat_wxyz(r: &Mat3) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    [q.w, q.i, q.j, q.k]
}

/// Rotation matrix from a (not necessarily normalized) quaternion `(w, x, y, z)`.
pub fn from_quat_wxyz(q: [f64; 4]) -> Mat3 {
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    q.to_rotation_matrix().into_inner()
}

/// Nearest rotation (polar factor) of a nearly orthonormal matrix.
pub fn orthonormalize(r: &Mat3) -> Mat3 {
    Rotation3::from_matrix_eps(r, 1e-15, 64, Rotation3::identity()).into_inner()
}
