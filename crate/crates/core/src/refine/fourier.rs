//! Fourier positional embedding: `x` followed by `sin(2^l π x)` and
//! `cos(2^l π x)` for `l = 0..L`, componentwise.

use std::f64::consts::PI;

use nalgebra::Vector3;

pub const DEFAULT_BANDS: usize = 6;

pub fn embedding_dim(bands: usize) -> usize {
    3 + 6 * bands
}

/// Layout: `[x, y, z, sin_0(xyz), cos_0(xyz), sin_1(xyz), ...]`.
pub fn fourier_embed(x: &Vector3<f64>, bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(embedding_dim(bands));
    out.extend_from_slice(x.as_slice());
    for l in 0..bands {
        let freq = (1u64 << l) as f64 * PI;
        out.extend(x.iter().map(|v| (freq * v).sin()));
        out.extend(x.iter().map(|v| (freq * v).cos()));
    }
    out
}
