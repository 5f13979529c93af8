//! CPU EWA splatting with an analytic backward pass.
//!
//! Each Gaussian is projected to a 2D conic (with the usual 0.3 px² low-pass
//! dilation) and composited front to back in camera-depth order. The
//! footprint kernel is truncated at 3σ and shifted so it reaches zero
//! continuously at the boundary:
//!
//! `G(p) = max(exp(p) - e^{-K}, 0) / (1 - e^{-K})`, `K = 4.5`,
//!
//! where `p` is the (non-positive) Mahalanobis exponent. Keeping `G`
//! continuous makes the rendered image a continuous function of every
//! parameter. Depth is the alpha-weighted mean camera z of the contributing
//! splats and carries no gradient.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, Vector3};
use ndarray::{Array2, Array3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::cloud::GaussianCloud;
use crate::error::{Error, Result};
use crate::render::RenderOutput;
use crate::sh;

/// Mahalanobis cutoff; `sqrt(2 K)` = 3 standard deviations.
pub const KERNEL_CUTOFF: f64 = 4.5;
const LOW_PASS: f64 = 0.3;
const NEAR: f64 = 0.01;
const TILE: usize = 16;

fn kernel_floor() -> f64 {
    (-KERNEL_CUTOFF).exp()
}

/// Footprint value for exponent `power` (≤ 0), and its derivative.
#[inline]
pub fn footprint(power: f64) -> (f64, f64) {
    if power < -KERNEL_CUTOFF {
        return (0.0, 0.0);
    }
    let floor = kernel_floor();
    let e = power.exp();
    let norm = 1.0 / (1.0 - floor);
    (((e - floor) * norm).max(0.0), e * norm)
}

/// Rotation matrix of a normalized `(w, x, y, z)` quaternion.
pub fn quat_to_matrix(q: &Quaternion<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient of `<G, R(q̂)>` w.r.t. the normalized quaternion components.
fn quat_matrix_backward(q: &Quaternion<f64>, g: &Matrix3<f64>) -> [f64; 4] {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    [dw, dx, dy, dz].map(|d| d.component_mul(g).sum())
}

/// One Gaussian after projection into a camera.
#[derive(Debug, Clone)]
struct Splat {
    index: usize,
    mean: [f64; 2],
    conic: [f64; 3],
    depth: f64,
    opacity: f64,
    color: [f64; 3],
    color_active: [bool; 3],
    // Cached for the backward pass.
    cam: Vector3<f64>,
    rot: Matrix3<f64>,
    scale: Vector3<f64>,
    jw: Matrix2x3<f64>,
    radius: f64,
}

/// Gaussians projected and binned for one camera; reused by the backward pass.
pub struct Projection {
    camera: Camera,
    splats: Vec<Splat>,
    tiles: Vec<Vec<u32>>,
    tiles_per_row: usize,
}

impl Projection {
    pub fn new(cloud: &GaussianCloud, camera: &Camera) -> Result<Self> {
        cloud.validate()?;
        camera.validate()?;
        let res = camera.resolution;
        let (f, c) = (camera.focal(), camera.principal_point());
        let world_to_cam = camera.rotation();
        let eye = camera.position();
        let mut splats = Vec::new();
        for i in 0..cloud.len() {
            let t = world_to_cam * (cloud.positions[i] - eye);
            if t.z <= NEAR {
                continue;
            }
            let q = cloud.rotations[i] / cloud.rotations[i].norm();
            let rot = quat_to_matrix(&q);
            let scale = cloud.scale_activated(i);
            let l = rot * Matrix3::from_diagonal(&scale);
            let cov3 = l * l.transpose();
            let j = Matrix2x3::new(f / t.z, 0.0, -f * t.x / (t.z * t.z), 0.0, -f / t.z, f * t.y / (t.z * t.z));
            let jw = j * world_to_cam;
            let cov2d = jw * cov3 * jw.transpose() + Matrix2::identity() * LOW_PASS;
            let det = cov2d.determinant();
            if det <= 0.0 || !det.is_finite() {
                continue;
            }
            let conic = [cov2d[(1, 1)] / det, -cov2d[(0, 1)] / det, cov2d[(0, 0)] / det];
            let mean = [c + f * t.x / t.z, c - f * t.y / t.z];
            let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
            let lambda = mid + (mid * mid - det).max(0.0).sqrt();
            let radius = (2.0 * KERNEL_CUTOFF).sqrt() * lambda.sqrt();
            if pixel_range(mean, radius, res).is_none() {
                continue;
            }
            let (color, color_active) = sh::eval_color(cloud.coeffs(i), cloud.sh_degree, &(cloud.positions[i] - eye));
            splats.push(Splat {
                index: i,
                mean,
                conic,
                depth: t.z,
                opacity: cloud.opacity_activated(i),
                color,
                color_active,
                cam: t,
                rot,
                scale,
                jw,
                radius,
            });
        }
        splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

        let tiles_per_row = res.div_ceil(TILE);
        let mut tiles = vec![Vec::new(); tiles_per_row * tiles_per_row];
        for (s_idx, s) in splats.iter().enumerate() {
            let (x0, x1, y0, y1) = pixel_range(s.mean, s.radius, res).unwrap();
            for ty in y0 / TILE..=y1 / TILE {
                for tx in x0 / TILE..=x1 / TILE {
                    tiles[ty * tiles_per_row + tx].push(s_idx as u32);
                }
            }
        }
        Ok(Self {
            camera: *camera,
            splats,
            tiles,
            tiles_per_row,
        })
    }

    /// Number of Gaussians that survived culling.
    pub fn visible_count(&self) -> usize {
        self.splats.len()
    }

    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    /// Cloud indices of the Gaussians that survived culling, front to back.
    pub fn visible_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.splats.iter().map(|s| s.index)
    }

    fn tile_pixels(&self, tile: usize) -> impl Iterator<Item = (usize, usize)> {
        let res = self.camera.resolution;
        let (ty, tx) = (tile / self.tiles_per_row, tile % self.tiles_per_row);
        let ys = ty * TILE..((ty + 1) * TILE).min(res);
        let xs = tx * TILE..((tx + 1) * TILE).min(res);
        ys.flat_map(move |y| xs.clone().map(move |x| (y, x)))
    }

    /// Contributions `(slot in tile list, alpha, power)` at pixel `(y, x)`
    /// in depth order.
    fn contributions<'a>(&'a self, tile: usize, y: usize, x: usize) -> impl Iterator<Item = (usize, f64, f64)> + 'a {
        let (px, py) = (x as f64, y as f64);
        self.tiles[tile].iter().enumerate().filter_map(move |(slot, &s_idx)| {
            let s = &self.splats[s_idx as usize];
            let (dx, dy) = (px - s.mean[0], py - s.mean[1]);
            let power = -0.5 * (s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy);
            let (g, _) = footprint(power);
            (g > 0.0).then_some((slot, s.opacity * g, power))
        })
    }

    pub fn forward(&self, background: f64) -> RenderOutput {
        let res = self.camera.resolution;
        let mut out = RenderOutput::blank(res, background);
        let results: Vec<Vec<(usize, usize, [f64; 3], f64, f64)>> = (0..self.tiles.len())
            .into_par_iter()
            .map(|tile| {
                if self.tiles[tile].is_empty() {
                    return Vec::new();
                }
                self.tile_pixels(tile)
                    .filter_map(|(y, x)| {
                        let mut t = 1.0;
                        let mut rgb = [0.0; 3];
                        let mut zsum = 0.0;
                        let mut any = false;
                        for (slot, alpha, _) in self.contributions(tile, y, x) {
                            let s = &self.splats[self.tiles[tile][slot] as usize];
                            let w = t * alpha;
                            for c in 0..3 {
                                rgb[c] += w * s.color[c];
                            }
                            zsum += w * s.depth;
                            t *= 1.0 - alpha;
                            any = true;
                        }
                        if !any {
                            return None;
                        }
                        for v in &mut rgb {
                            *v += t * background;
                        }
                        let a = 1.0 - t;
                        let depth = if a > 0.0 { zsum / a } else { f64::INFINITY };
                        Some((y, x, rgb, a, depth))
                    })
                    .collect()
            })
            .collect();
        for (y, x, rgb, a, depth) in results.into_iter().flatten() {
            for c in 0..3 {
                out.rgb[[y, x, c]] = rgb[c];
            }
            out.alpha[[y, x]] = a;
            out.depth[[y, x]] = depth;
        }
        out
    }

    /// Backpropagates `∂L/∂rgb` (and optionally `∂L/∂alpha`) to every
    /// Gaussian parameter of `cloud`, which must be the cloud this
    /// projection was built from.
    pub fn backward(
        &self,
        cloud: &GaussianCloud,
        background: f64,
        grad_rgb: &Array3<f64>,
        grad_alpha: Option<&Array2<f64>>,
    ) -> CloudGrad {
        let n = self.splats.len();
        // Per tile: sparse (splat, partials) accumulation, reduced in tile order.
        let per_tile: Vec<Vec<(usize, SplatPartials)>> = (0..self.tiles.len())
            .into_par_iter()
            .map(|tile| self.tile_backward(tile, background, grad_rgb, grad_alpha))
            .collect();
        let mut partials = vec![SplatPartials::default(); n];
        for list in per_tile {
            for (s_idx, p) in list {
                partials[s_idx].add(&p);
            }
        }

        let mut grad = CloudGrad::zeros(cloud);
        let f = self.camera.focal();
        let world_to_cam = self.camera.rotation();
        let eye = self.camera.position();
        let nb = cloud.basis_count();
        for (s, p) in self.splats.iter().zip(&partials) {
            let i = s.index;
            grad.mean2d[i][0] += p.mean[0];
            grad.mean2d[i][1] += p.mean[1];

            // Color.
            let view = cloud.positions[i] - eye;
            let d_view = sh::color_backward(
                cloud.coeffs(i),
                cloud.sh_degree,
                &view,
                s.color_active,
                p.color,
                &mut grad.sh_coeffs[i * nb..(i + 1) * nb],
            );
            grad.positions[i] += d_view;

            // Opacity.
            grad.opacity_logits[i] += p.opacity * s.opacity * (1.0 - s.opacity);

            // Conic -> 2D covariance (full symmetric matrix calculus).
            let k = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
            let gk = Matrix2::new(p.conic[0], 0.5 * p.conic[1], 0.5 * p.conic[1], p.conic[2]);
            let g2 = -k * gk * k;

            // 2D covariance -> 3D covariance and the projection Jacobian.
            let l = s.rot * Matrix3::from_diagonal(&s.scale);
            let cov3 = l * l.transpose();
            let g3 = s.jw.transpose() * g2 * s.jw;
            let g_jw = 2.0 * g2 * s.jw * cov3;
            let g_j = g_jw * world_to_cam.transpose();

            // Camera-space mean from the Jacobian and the pixel mean.
            let t = s.cam;
            let (tz2, tz3) = (t.z * t.z, t.z * t.z * t.z);
            let mut g_t = Vector3::zeros();
            g_t.x += g_j[(0, 2)] * (-f / tz2);
            g_t.y += g_j[(1, 2)] * (f / tz2);
            g_t.z += g_j[(0, 0)] * (-f / tz2)
                + g_j[(0, 2)] * (2.0 * f * t.x / tz3)
                + g_j[(1, 1)] * (f / tz2)
                + g_j[(1, 2)] * (-2.0 * f * t.y / tz3);
            g_t.x += p.mean[0] * f / t.z;
            g_t.z += p.mean[0] * (-f * t.x / tz2);
            g_t.y += p.mean[1] * (-f / t.z);
            g_t.z += p.mean[1] * (f * t.y / tz2);
            grad.positions[i] += world_to_cam.transpose() * g_t;

            // 3D covariance -> scale and rotation.
            let g_l = 2.0 * g3 * l;
            for a in 0..3 {
                let ds: f64 = (0..3).map(|r| s.rot[(r, a)] * g_l[(r, a)]).sum();
                grad.log_scales[i][a] += ds * s.scale[a];
            }
            let g_rot = g_l * Matrix3::from_diagonal(&s.scale);
            let q_raw = cloud.rotations[i];
            let norm = q_raw.norm();
            let q = q_raw / norm;
            let gq = quat_matrix_backward(&q, &g_rot);
            let gq = Quaternion::new(gq[0], gq[1], gq[2], gq[3]);
            // Through q / |q|.
            let dot = q.coords.dot(&gq.coords);
            grad.rotations[i] += (gq - q * dot) / norm;
        }
        grad
    }

    fn tile_backward(
        &self,
        tile: usize,
        background: f64,
        grad_rgb: &Array3<f64>,
        grad_alpha: Option<&Array2<f64>>,
    ) -> Vec<(usize, SplatPartials)> {
        if self.tiles[tile].is_empty() {
            return Vec::new();
        }
        let list = &self.tiles[tile];
        let mut local = vec![SplatPartials::default(); list.len()];
        let mut touched = vec![false; list.len()];
        let mut stack: Vec<(usize, f64, f64, f64)> = Vec::new();
        for (y, x) in self.tile_pixels(tile) {
            let dc = [grad_rgb[[y, x, 0]], grad_rgb[[y, x, 1]], grad_rgb[[y, x, 2]]];
            let da = grad_alpha.map_or(0.0, |g| g[[y, x]]);
            if dc == [0.0; 3] && da == 0.0 {
                continue;
            }
            stack.clear();
            let mut t = 1.0;
            for (slot, alpha, power) in self.contributions(tile, y, x) {
                stack.push((slot, alpha, power, t));
                t *= 1.0 - alpha;
            }
            let mut behind = [background; 3];
            let mut suffix = 1.0;
            for &(slot, alpha, power, t_i) in stack.iter().rev() {
                let s = &self.splats[list[slot] as usize];
                let mut d_alpha = da * t_i * suffix;
                for c in 0..3 {
                    d_alpha += dc[c] * t_i * (s.color[c] - behind[c]);
                }
                let (g, dg) = footprint(power);
                let d_power = d_alpha * s.opacity * dg;
                let (dx, dy) = (x as f64 - s.mean[0], y as f64 - s.mean[1]);
                touched[slot] = true;
                let p = &mut local[slot];
                for c in 0..3 {
                    p.color[c] += dc[c] * t_i * alpha;
                }
                p.opacity += d_alpha * g;
                p.conic[0] += d_power * (-0.5 * dx * dx);
                p.conic[1] += d_power * (-dx * dy);
                p.conic[2] += d_power * (-0.5 * dy * dy);
                p.mean[0] += d_power * (s.conic[0] * dx + s.conic[1] * dy);
                p.mean[1] += d_power * (s.conic[1] * dx + s.conic[2] * dy);

                for c in 0..3 {
                    behind[c] = alpha * s.color[c] + (1.0 - alpha) * behind[c];
                }
                suffix *= 1.0 - alpha;
            }
        }
        list.iter()
            .zip(local)
            .zip(touched)
            .filter(|(_, t)| *t)
            .map(|((&s_idx, p), _)| (s_idx as usize, p))
            .collect()
    }
}

fn pixel_range(mean: [f64; 2], radius: f64, res: usize) -> Option<(usize, usize, usize, usize)> {
    let max = res as f64 - 1.0;
    let x0 = (mean[0] - radius).ceil().max(0.0);
    let x1 = (mean[0] + radius).floor().min(max);
    let y0 = (mean[1] - radius).ceil().max(0.0);
    let y1 = (mean[1] + radius).floor().min(max);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
}

#[derive(Debug, Clone, Copy, Default)]
struct SplatPartials {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl SplatPartials {
    fn add(&mut self, o: &SplatPartials) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Gradients w.r.t. every optimizable field of a [`GaussianCloud`], plus the
/// pixel-space mean gradient used for densification statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGrad {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<Quaternion<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub opacity_logits: Vec<f64>,
    pub sh_coeffs: Vec<[f64; 3]>,
    pub mean2d: Vec<[f64; 2]>,
}

impl CloudGrad {
    pub fn zeros(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        Self {
            positions: vec![Vector3::zeros(); n],
            rotations: vec![Quaternion::new(0.0, 0.0, 0.0, 0.0); n],
            log_scales: vec![Vector3::zeros(); n],
            opacity_logits: vec![0.0; n],
            sh_coeffs: vec![[0.0; 3]; cloud.sh_coeffs.len()],
            mean2d: vec![[0.0; 2]; n],
        }
    }

    pub fn add_assign(&mut self, other: &CloudGrad) {
        for (a, b) in self.positions.iter_mut().zip(&other.positions) {
            *a += b;
        }
        for (a, b) in self.rotations.iter_mut().zip(&other.rotations) {
            *a += b;
        }
        for (a, b) in self.log_scales.iter_mut().zip(&other.log_scales) {
            *a += b;
        }
        for (a, b) in self.opacity_logits.iter_mut().zip(&other.opacity_logits) {
            *a += b;
        }
        for (a, b) in self.sh_coeffs.iter_mut().zip(&other.sh_coeffs) {
            for c in 0..3 {
                a[c] += b[c];
            }
        }
        for (a, b) in self.mean2d.iter_mut().zip(&other.mean2d) {
            a[0] += b[0];
            a[1] += b[1];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rotations.iter().all(|q| q.coords.iter().all(|x| x.is_finite()))
            && self.log_scales.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.opacity_logits.iter().all(|x| x.is_finite())
            && self.sh_coeffs.iter().flatten().all(|x| x.is_finite())
    }
}

/// Forward render of a Gaussian cloud. Non-finite parameters are a
/// validation error; a camera that sees nothing yields pure background.
pub fn rasterize_gaussians(cloud: &GaussianCloud, camera: &Camera, background: f64) -> Result<RenderOutput> {
    if !(0.0..=1.0).contains(&background) {
        return Err(Error::Validation(format!("background {background} outside [0,1]")));
    }
    Ok(Projection::new(cloud, camera)?.forward(background))
}
