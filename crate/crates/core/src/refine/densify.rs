//! Adaptive density control: clone small or split large Gaussians whose
//! screen-space gradient is persistently high, and drop transparent ones.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::cloud::{logit, GaussianCloud};
use crate::render::splat::quat_to_matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    /// Iterations between densify/prune passes.
    pub interval: usize,
    /// No densification at or after this iteration; pruning continues.
    pub until: usize,
    pub prune_opacity: f64,
    /// Mean pixel-space gradient norm above which a Gaussian is densified.
    pub grad_threshold: f64,
    /// Gaussians whose largest scale exceeds this fraction of the scene
    /// extent are split; smaller ones are cloned.
    pub percent_dense: f64,
    pub split_factor: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            interval: 100,
            until: 500,
            prune_opacity: 0.005,
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            split_factor: 1.6,
        }
    }
}

/// Running mean of the screen-space gradient norm per Gaussian, counted
/// over the renders in which it was visible.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStats {
    pub accum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self {
            accum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn record(&mut self, mean2d: &[[f64; 2]], visible: impl IntoIterator<Item = usize>) {
        for i in visible {
            self.accum[i] += mean2d[i][0].hypot(mean2d[i][1]);
            self.count[i] += 1;
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.accum[i] / self.count[i] as f64
        }
    }
}

/// Result of one density-control pass. `origin[k]` is the pre-pass index
/// of output Gaussian `k` when it is a surviving original, `None` when it
/// was created by cloning or splitting.
#[derive(Debug, Clone)]
pub struct Densified {
    pub cloud: GaussianCloud,
    pub origin: Vec<Option<usize>>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// One density-control pass. `densify = false` only prunes.
pub fn densify_prune(cloud: &GaussianCloud, stats: &GradStats, config: &DensifyConfig, extent: f64, densify: bool) -> Densified {
    let n = cloud.len();
    let mut out = cloud.clone();
    let mut keep = vec![true; n];
    let (mut cloned, mut split, mut pruned) = (0, 0, 0);
    let mut created = Vec::new();
    for i in 0..n {
        if cloud.opacity_activated(i) < config.prune_opacity {
            keep[i] = false;
            pruned += 1;
            continue;
        }
        if !densify || stats.mean(i) < config.grad_threshold {
            continue;
        }
        let scale = cloud.scale_activated(i);
        if scale.max() <= config.percent_dense * extent {
            created.push(out.duplicate(i));
            cloned += 1;
        } else {
            let [a, b] = split_children(&mut out, i, config.split_factor);
            created.extend([a, b]);
            keep[i] = false;
            split += 1;
        }
    }
    let mut mask = keep;
    mask.resize(out.len(), false);
    for &k in &created {
        mask[k] = true;
    }
    let origin: Vec<Option<usize>> = (0..out.len()).filter(|&k| mask[k]).map(|k| (k < n).then_some(k)).collect();
    out.retain(&mask);
    Densified {
        cloud: out,
        origin,
        cloned,
        split,
        pruned,
    }
}

/// Replaces Gaussian `i` by two children along its longest axis, matching
/// the first two moments of the parent along that axis: offsets `±a σ`
/// and child scale `σ/φ` with `a² + 1/φ² = 1`. Child opacity is chosen so
/// the two overlapping children composite to the parent's peak opacity.
fn split_children(cloud: &mut GaussianCloud, i: usize, factor: f64) -> [usize; 2] {
    let scale = cloud.scale_activated(i);
    let k = scale.imax();
    let q = cloud.rotations[i] / cloud.rotations[i].norm();
    let axis: Vector3<f64> = quat_to_matrix(&q).column(k).into();
    let shift = (1.0 - 1.0 / (factor * factor)).sqrt() * scale[k];
    let alpha = cloud.opacity_activated(i);
    // Each child peaks at the parent center with exp(-a²φ²/2).
    let g = (-0.5 * (shift * factor / scale[k]).powi(2)).exp();
    let child_alpha = ((1.0 - (1.0 - alpha).sqrt()) / g).min(0.99);
    let children = [cloud.duplicate(i), cloud.duplicate(i)];
    for (c, sign) in children.iter().zip([1.0, -1.0]) {
        cloud.positions[*c] += axis * (sign * shift);
        cloud.log_scales[*c][k] -= factor.ln();
        cloud.opacity_logits[*c] = logit(child_alpha);
    }
    children
}
