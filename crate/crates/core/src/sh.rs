//! Real spherical harmonics up to degree 3, in the sign convention used by
//! common splat viewers, with derivatives w.r.t. the view direction.

use nalgebra::{Matrix3, Vector3};

pub const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_DEGREE: usize = 3;

pub fn basis_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

pub fn rgb_to_dc(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|c| (c - 0.5) / C0)
}

pub fn dc_to_rgb(dc: [f64; 3]) -> [f64; 3] {
    dc.map(|c| C0 * c + 0.5)
}

/// Basis values at unit direction `d` and their partials `∂b_k/∂d`.
/// Only the first `basis_count(degree)` entries are written.
pub fn basis_with_grad(degree: usize, d: &Vector3<f64>, b: &mut [f64; 16], db: &mut [[f64; 3]; 16]) {
    let (x, y, z) = (d.x, d.y, d.z);
    b[0] = C0;
    db[0] = [0.0; 3];
    if degree == 0 {
        return;
    }
    b[1] = -C1 * y;
    db[1] = [0.0, -C1, 0.0];
    b[2] = C1 * z;
    db[2] = [0.0, 0.0, C1];
    b[3] = -C1 * x;
    db[3] = [-C1, 0.0, 0.0];
    if degree == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    b[4] = C2[0] * x * y;
    db[4] = [C2[0] * y, C2[0] * x, 0.0];
    b[5] = C2[1] * y * z;
    db[5] = [0.0, C2[1] * z, C2[1] * y];
    b[6] = C2[2] * (2.0 * zz - xx - yy);
    db[6] = [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z];
    b[7] = C2[3] * x * z;
    db[7] = [C2[3] * z, 0.0, C2[3] * x];
    b[8] = C2[4] * (xx - yy);
    db[8] = [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0];
    if degree == 2 {
        return;
    }
    b[9] = C3[0] * y * (3.0 * xx - yy);
    db[9] = [6.0 * C3[0] * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
    b[10] = C3[1] * x * y * z;
    db[10] = [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y];
    b[11] = C3[2] * y * (4.0 * zz - xx - yy);
    db[11] = [
        -2.0 * C3[2] * x * y,
        C3[2] * (4.0 * zz - xx - 3.0 * yy),
        8.0 * C3[2] * y * z,
    ];
    b[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    db[12] = [
        -6.0 * C3[3] * x * z,
        -6.0 * C3[3] * y * z,
        C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
    ];
    b[13] = C3[4] * x * (4.0 * zz - xx - yy);
    db[13] = [
        C3[4] * (4.0 * zz - 3.0 * xx - yy),
        -2.0 * C3[4] * x * y,
        8.0 * C3[4] * x * z,
    ];
    b[14] = C3[5] * z * (xx - yy);
    db[14] = [2.0 * C3[5] * x * z, -2.0 * C3[5] * y * z, C3[5] * (xx - yy)];
    b[15] = C3[6] * x * (xx - 3.0 * yy);
    db[15] = [C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * C3[6] * x * y, 0.0];
}

/// View-dependent color of one Gaussian seen along `view` (center minus
/// camera position, not necessarily normalized). Channels are clamped to
/// `[0, 1]`; `active[c]` reports whether channel `c` is unclamped.
pub fn eval_color(coeffs: &[[f64; 3]], degree: usize, view: &Vector3<f64>) -> ([f64; 3], [bool; 3]) {
    let mut b = [0.0; 16];
    let mut db = [[0.0; 3]; 16];
    let d = view.normalize();
    basis_with_grad(degree, &d, &mut b, &mut db);
    let mut raw = [0.5; 3];
    for (k, c) in coeffs.iter().enumerate().take(basis_count(degree)) {
        for ch in 0..3 {
            raw[ch] += b[k] * c[ch];
        }
    }
    let active = raw.map(|v| (0.0..=1.0).contains(&v));
    (raw.map(|v| v.clamp(0.0, 1.0)), active)
}

/// Backward of [`eval_color`]: given `∂L/∂color`, accumulates `∂L/∂coeffs`
/// and returns `∂L/∂view`.
pub fn color_backward(
    coeffs: &[[f64; 3]],
    degree: usize,
    view: &Vector3<f64>,
    active: [bool; 3],
    grad_color: [f64; 3],
    grad_coeffs: &mut [[f64; 3]],
) -> Vector3<f64> {
    let mut b = [0.0; 16];
    let mut db = [[0.0; 3]; 16];
    let norm = view.norm();
    let d = view / norm;
    basis_with_grad(degree, &d, &mut b, &mut db);
    let g = [0, 1, 2].map(|c| if active[c] { grad_color[c] } else { 0.0 });
    let mut grad_d = Vector3::zeros();
    for k in 0..basis_count(degree) {
        let mut s = 0.0;
        for ch in 0..3 {
            grad_coeffs[k][ch] += g[ch] * b[k];
            s += g[ch] * coeffs[k][ch];
        }
        grad_d += Vector3::from(db[k]) * s;
    }
    // d = v / |v|
    let proj = Matrix3::identity() - d * d.transpose();
    proj * grad_d / norm
}
