//! Real spherical harmonics up to degree 3, in the basis ordering and sign
//! convention used by splat interchange files.

use crate::error::{Error, Result};
use crate::so3::Vec3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_SH_DEGREE: u8 = 3;

/// Number of basis functions for `degree`.
pub const fn basis_len(degree: u8) -> usize {
    let d = degree as usize + 1;
    d * d
}

/// Coefficients per Gaussian (three colour channels).
pub const fn coeff_len(degree: u8) -> usize {
    3 * basis_len(degree)
}

/// Basis values `Y_k(d)` for `k < basis_len(degree)`.
pub fn basis(dir: &Vec3, degree: u8, out: &mut [f64; 16]) {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    out[0] = SH_C0;
    if degree == 0 {
        return;
    }
    out[1] = -SH_C1 * y;
    out[2] = SH_C1 * z;
    out[3] = -SH_C1 * x;
    if degree == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = SH_C2[0] * x * y;
    out[5] = SH_C2[1] * y * z;
    out[6] = SH_C2[2] * (2.0 * zz - xx - yy);
    out[7] = SH_C2[3] * x * z;
    out[8] = SH_C2[4] * (xx - yy);
    if degree == 2 {
        return;
    }
    out[9] = SH_C3[0] * y * (3.0 * xx - yy);
    out[10] = SH_C3[1] * x * y * z;
    out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = SH_C3[5] * z * (xx - yy);
    out[15] = SH_C3[6] * x * (xx - 3.0 * yy);
}

/// Partial derivatives of the basis with respect to the direction components.
fn basis_grad(dir: &Vec3, degree: u8, out: &mut [[f64; 3]; 16]) {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    out[0] = [0.0; 3];
    if degree == 0 {
        return;
    }
    out[1] = [0.0, -SH_C1, 0.0];
    out[2] = [0.0, 0.0, SH_C1];
    out[3] = [-SH_C1, 0.0, 0.0];
    if degree == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let s = |c: f64, v: [f64; 3]| [c * v[0], c * v[1], c * v[2]];
    out[4] = s(SH_C2[0], [y, x, 0.0]);
    out[5] = s(SH_C2[1], [0.0, z, y]);
    out[6] = s(SH_C2[2], [-2.0 * x, -2.0 * y, 4.0 * z]);
    out[7] = s(SH_C2[3], [z, 0.0, x]);
    out[8] = s(SH_C2[4], [2.0 * x, -2.0 * y, 0.0]);
    if degree == 2 {
        return;
    }
    out[9] = s(SH_C3[0], [6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0]);
    out[10] = s(SH_C3[1], [y * z, x * z, x * y]);
    out[11] = s(
        SH_C3[2],
        [-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z],
    );
    out[12] = s(
        SH_C3[3],
        [-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy],
    );
    out[13] = s(
        SH_C3[4],
        [4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z],
    );
    out[14] = s(SH_C3[5], [2.0 * x * z, -2.0 * y * z, xx - yy]);
    out[15] = s(SH_C3[6], [3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0]);
}

/// Colour before the `[0, 1]` clamp: `Σ c_k Y_k(d) + 0.5`. Coefficients are
/// laid out basis-major, `coeffs[3 * k + channel]`.
pub fn eval_unclamped(coeffs: &[f64], dir: &Vec3, degree: u8) -> [f64; 3] {
    let mut y = [0.0; 16];
    basis(dir, degree, &mut y);
    let mut rgb = [0.5; 3];
    for (k, yk) in y.iter().enumerate().take(basis_len(degree)) {
        for c in 0..3 {
            rgb[c] += coeffs[3 * k + c] * yk;
        }
    }
    rgb
}

/// View-dependent colour in `[0, 1]`.
pub fn eval_sh(coeffs: &[f64], view_direction: &Vec3, degree: u8) -> Result<[f64; 3]> {
    if degree > MAX_SH_DEGREE {
        return Err(Error::Bound {
            what: "SH degree",
            value: degree.to_string(),
            allowed: "0..=3",
        });
    }
    if coeffs.len() != coeff_len(degree) {
        return Err(Error::shape(
            "SH coefficients",
            coeff_len(degree),
            coeffs.len(),
        ));
    }
    let norm = view_direction.norm();
    if (norm - 1.0).abs() > 1e-6 || !norm.is_finite() {
        return Err(Error::Normalization { norm });
    }
    Ok(eval_unclamped(coeffs, view_direction, degree).map(|v| v.clamp(0.0, 1.0)))
}

/// Backward pass of the clamped evaluation. Accumulates into `g_coeffs` and
/// returns the gradient with respect to the (unnormalized) direction argument.
pub fn eval_vjp(
    coeffs: &[f64],
    dir: &Vec3,
    degree: u8,
    g_rgb: [f64; 3],
    g_coeffs: &mut [f64],
) -> Vec3 {
    let raw = eval_unclamped(coeffs, dir, degree);
    let mut g = [0.0; 3];
    for c in 0..3 {
        if (0.0..=1.0).contains(&raw[c]) {
            g[c] = g_rgb[c];
        }
    }
    let mut y = [0.0; 16];
    basis(dir, degree, &mut y);
    let mut dy = [[0.0; 3]; 16];
    basis_grad(dir, degree, &mut dy);
    let mut g_dir = Vec3::zeros();
    for k in 0..basis_len(degree) {
        let mut gk = 0.0;
        for c in 0..3 {
            g_coeffs[3 * k + c] += g[c] * y[k];
            gk += g[c] * coeffs[3 * k + c];
        }
        g_dir += gk * Vec3::new(dy[k][0], dy[k][1], dy[k][2]);
    }
    g_dir
}

/// Degree-0 coefficient that reproduces `color` (inverse of the offset convention).
pub fn rgb_to_dc(color: f64) -> f64 {
    (color - 0.5) / SH_C0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degree_zero_is_isotropic() {
        let c = 0.7;
        let coeffs = [c, c, c];
        for dir in [Vec3::x(), -Vec3::z(), Vec3::new(1.0, 2.0, -2.0) / 3.0] {
            let rgb = eval_sh(&coeffs, &dir, 0).unwrap();
            let expected = (0.282_094_79 * c + 0.5f64).clamp(0.0, 1.0);
            for v in rgb {
                assert!((v - expected).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_coefficients_give_mid_grey() {
        let coeffs = vec![0.0; coeff_len(3)];
        let rgb = eval_sh(&coeffs, &Vec3::new(0.0, 0.6, 0.8), 3).unwrap();
        assert_eq!(rgb, [0.5; 3]);
    }

    #[test]
    fn degree_one_z_term() {
        let c = 0.3;
        let mut coeffs = vec![0.0; coeff_len(1)];
        for ch in 0..3 {
            coeffs[3 * 2 + ch] = c;
        }
        let up = eval_sh(&coeffs, &Vec3::z(), 1).unwrap();
        let down = eval_sh(&coeffs, &-Vec3::z(), 1).unwrap();
        assert!((up[0] - down[0] - 2.0 * 0.488_602_51 * c).abs() < 1e-8);
    }

    #[test]
    fn rejects_non_unit_direction() {
        let coeffs = [0.0; 3];
        assert!(matches!(
            eval_sh(&coeffs, &Vec3::new(0.0, 0.0, 2.0), 0),
            Err(Error::Normalization { .. })
        ));
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let degree = 3;
        let n = coeff_len(degree);
        let coeffs: Vec<f64> = (0..n).map(|i| 0.1 * ((i as f64 * 1.7).sin())).collect();
        let dir = Vec3::new(0.3, -0.5, 0.81).normalize();
        let g_rgb = [0.7, -0.2, 0.4];
        let mut g_coeffs = vec![0.0; n];
        let g_dir = eval_vjp(&coeffs, &dir, degree, g_rgb, &mut g_coeffs);
        let f = |c: &[f64], d: &Vec3| {
            let v = eval_unclamped(c, d, degree);
            v[0] * g_rgb[0] + v[1] * g_rgb[1] + v[2] * g_rgb[2]
        };
        let h = 1e-6;
        for i in 0..n {
            let mut p = coeffs.clone();
            p[i] += h;
            let mut m = coeffs.clone();
            m[i] -= h;
            let num = (f(&p, &dir) - f(&m, &dir)) / (2.0 * h);
            assert!((num - g_coeffs[i]).abs() < 1e-8);
        }
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            let num = (f(&coeffs, &(dir + e)) - f(&coeffs, &(dir - e))) / (2.0 * h);
            assert!((num - g_dir[k]).abs() < 1e-7, "{k}: {num} vs {}", g_dir[k]);
        }
    }
}
