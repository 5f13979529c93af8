//! Stage two: image-conditioned multi-view score distillation.
//!
//! Every iteration renders four orthogonal views at a random azimuth phase,
//! noises their latents to a random level below a decaying ceiling, asks
//! the denoiser (conditioned on one randomly chosen edited view and the
//! cameras) for the noise, and pushes `w (ε̂ − ε)` back through the codec and
//! the rasterizer into every Gaussian parameter. A perceptual loss against
//! the edited views at the canonical rig is added each iteration, and
//! density control runs on a fixed interval.

use nalgebra::{Quaternion, Vector3};
use ndarray::Array4;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::RigConfig;
use crate::cloud::GaussianCloud;
use crate::error::{Error, Result};
use crate::guidance::backend::{Condition, DenoiserBackend};
use crate::guidance::ddim::cfg_epsilon;
use crate::refine::densify::{densify_prune, DensifyConfig, GradStats};
use crate::refine::loss::PerceptualLoss;
use crate::refine::optim::Adam;
use crate::render::{CloudGrad, Projection};
use crate::views::MultiViewImageSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub sh: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 0.05,
            sh: 2.5e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdsConfig {
    pub iterations: usize,
    /// Noise-level ceiling (fraction of the schedule) at the first and last
    /// iteration; linear in between.
    pub t_max_start: f64,
    pub t_max_end: f64,
    pub t_min: f64,
    pub cfg_scale: f64,
    pub sds_weight: f64,
    pub perceptual_weight: f64,
    pub lr: LearningRates,
    pub densify: DensifyConfig,
    /// Consecutive non-finite gradients tolerated before aborting.
    pub max_nan_streak: usize,
}

impl Default for SdsConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            t_max_start: 0.49,
            t_max_end: 0.02,
            t_min: 0.02,
            cfg_scale: 5.0,
            sds_weight: 1.0,
            perceptual_weight: 1.0,
            lr: LearningRates::default(),
            densify: DensifyConfig::default(),
            max_nan_streak: 10,
        }
    }
}

impl SdsConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(in_unit(self.t_max_start) && in_unit(self.t_max_end) && in_unit(self.t_min)) {
            return Err(Error::Validation("noise-level fractions must lie in [0, 1]".into()));
        }
        if self.t_max_end > self.t_max_start {
            return Err(Error::Validation("t_max must not increase".into()));
        }
        if self.t_max_end < self.t_min {
            return Err(Error::Validation(format!("t_max_end {} below t_min {}", self.t_max_end, self.t_min)));
        }
        if self.max_nan_streak == 0 || self.densify.interval == 0 {
            return Err(Error::Validation("max_nan_streak and densify.interval must be positive".into()));
        }
        Ok(())
    }

    /// Ceiling on the sampled noise level at `iter`.
    pub fn t_max(&self, iter: usize) -> f64 {
        if self.iterations == 0 {
            return self.t_max_start;
        }
        let s = iter.min(self.iterations) as f64 / self.iterations as f64;
        // Convex form keeps both endpoints exact in floating point.
        self.t_max_start * (1.0 - s) + self.t_max_end * s
    }
}

/// The random choices of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdsSample {
    /// Azimuth phase of the four rendered views, degrees in `[0, 90)`.
    pub phase: f64,
    pub cond_view: usize,
    /// Noise level as a schedule fraction and the matching timestep.
    pub t: f64,
    pub timestep: usize,
}

pub struct SdsStep {
    pub grad: CloudGrad,
    pub sample: SdsSample,
    pub perceptual: f64,
    /// RMS of `ε̂ − ε` over the latent.
    pub residual_rms: f64,
    /// Visible Gaussian indices of every render in this step.
    pub visible: Vec<Vec<usize>>,
}

/// Gradient of one iteration with respect to every Gaussian parameter.
/// Nothing is applied; the caller owns the optimizer.
#[allow(clippy::too_many_arguments)]
pub fn sds_step(
    cloud: &GaussianCloud,
    backend: &dyn DenoiserBackend,
    edited: &MultiViewImageSet,
    rig: &RigConfig,
    loss: &dyn PerceptualLoss,
    config: &SdsConfig,
    iter: usize,
    rng: &mut impl Rng,
) -> Result<SdsStep> {
    let phase = rng.random_range(0.0..90.0);
    let cond_view = rng.random_range(0..4);
    let (lo, hi) = (config.t_min, config.t_max(iter));
    let t = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let schedule = backend.schedule();
    let timestep = (t * (schedule.len() - 1) as f64).round() as usize;
    let ab = schedule.alpha_bar(timestep);

    let novel = rig.with_phase(phase);
    let projections = novel
        .cameras()?
        .iter()
        .map(|cam| Projection::new(cloud, cam))
        .collect::<Result<Vec<_>>>()?;
    let renders = MultiViewImageSet::new(
        novel.azimuths,
        projections.iter().map(|p| p.forward(rig.background)).collect(),
    )?;
    let z0 = backend.encode(&renders)?;
    let noise = Array4::<f64>::from_shape_simple_fn(z0.dim(), || StandardNormal.sample(rng));
    let zt = &z0 * ab.sqrt() + &noise * (1.0 - ab).sqrt();
    let cond = Condition::image(edited.views[cond_view].rgb.clone()).with_azimuths(novel.azimuths);
    let eps = cfg_epsilon(backend, &zt, timestep, &cond, config.cfg_scale)?;
    let residual = eps - &noise;
    let residual_rms = (residual.iter().map(|r| r * r).sum::<f64>() / residual.len().max(1) as f64).sqrt();
    let grad_z = residual * (config.sds_weight / z0.len().max(1) as f64);
    let image_grads = backend.encode_vjp(&renders, &grad_z)?;

    let mut grad = CloudGrad::zeros(cloud);
    let mut visible = Vec::new();
    for (proj, g) in projections.iter().zip(&image_grads) {
        grad.add_assign(&proj.backward(cloud, rig.background, g, None));
        visible.push(proj.visible_indices().collect());
    }

    let mut perceptual = 0.0;
    if config.perceptual_weight > 0.0 {
        for (cam, target) in rig.cameras()?.iter().zip(&edited.views) {
            let proj = Projection::new(cloud, cam)?;
            let out = proj.forward(rig.background);
            let (l, g) = loss.loss(&out.rgb, &target.rgb)?;
            perceptual += l;
            grad.add_assign(&proj.backward(cloud, rig.background, &(g * config.perceptual_weight), None));
            visible.push(proj.visible_indices().collect());
        }
    }
    Ok(SdsStep {
        grad,
        sample: SdsSample {
            phase,
            cond_view,
            t,
            timestep,
        },
        perceptual,
        residual_rms,
        visible,
    })
}

/// Per-parameter-group Adam state over a cloud whose size changes.
struct CloudOptimizer {
    groups: [Adam; 5],
    widths: [usize; 5],
}

impl CloudOptimizer {
    fn new(cloud: &GaussianCloud, lr: &LearningRates) -> Self {
        let widths = [3, 4, 3, 1, 3 * cloud.basis_count()];
        let rates = [lr.position, lr.rotation, lr.scale, lr.opacity, lr.sh];
        let n = cloud.len();
        Self {
            groups: std::array::from_fn(|g| Adam::new(rates[g], widths[g] * n)),
            widths,
        }
    }

    fn step(&mut self, cloud: &mut GaussianCloud, grad: &CloudGrad) {
        let flat3 = |v: &[Vector3<f64>]| v.iter().flat_map(|x| x.iter().copied()).collect::<Vec<_>>();
        let quat = |v: &[Quaternion<f64>]| v.iter().flat_map(|q| [q.w, q.i, q.j, q.k]).collect::<Vec<_>>();
        let sh = |v: &[[f64; 3]]| v.iter().flatten().copied().collect::<Vec<_>>();

        let mut p = flat3(&cloud.positions);
        self.groups[0].step(&mut p, &flat3(&grad.positions));
        for (dst, src) in cloud.positions.iter_mut().zip(p.chunks(3)) {
            *dst = Vector3::from_column_slice(src);
        }
        let mut p = quat(&cloud.rotations);
        self.groups[1].step(&mut p, &quat(&grad.rotations));
        for (dst, s) in cloud.rotations.iter_mut().zip(p.chunks(4)) {
            *dst = Quaternion::new(s[0], s[1], s[2], s[3]);
        }
        let mut p = flat3(&cloud.log_scales);
        self.groups[2].step(&mut p, &flat3(&grad.log_scales));
        for (dst, src) in cloud.log_scales.iter_mut().zip(p.chunks(3)) {
            *dst = Vector3::from_column_slice(src);
        }
        self.groups[3].step(&mut cloud.opacity_logits, &grad.opacity_logits);
        let mut p = sh(&cloud.sh_coeffs);
        self.groups[4].step(&mut p, &sh(&grad.sh_coeffs));
        for (dst, s) in cloud.sh_coeffs.iter_mut().zip(p.chunks(3)) {
            *dst = [s[0], s[1], s[2]];
        }
    }

    fn remap(&mut self, origin: &[Option<usize>]) {
        for (adam, &w) in self.groups.iter_mut().zip(&self.widths) {
            let map: Vec<Option<usize>> = origin
                .iter()
                .flat_map(|o| (0..w).map(move |k| o.map(|i| i * w + k)))
                .collect();
            adam.remap(&map);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdsLogEntry {
    pub iter: usize,
    pub t_max: f64,
    pub sample: SdsSample,
    pub perceptual: f64,
    pub residual_rms: f64,
    pub gaussians: usize,
    pub skipped: bool,
}

#[derive(Debug, Clone)]
pub struct SdsResult {
    pub cloud: GaussianCloud,
    pub log: Vec<SdsLogEntry>,
}

/// Runs the full score-distillation stage with Adam on every parameter
/// group. Non-finite gradients skip the update; `max_nan_streak` of them in
/// a row abort the run.
pub fn refine_sds(
    cloud: &GaussianCloud,
    backend: &dyn DenoiserBackend,
    edited: &MultiViewImageSet,
    rig: &RigConfig,
    loss: &dyn PerceptualLoss,
    config: &SdsConfig,
    rng: &mut impl Rng,
) -> Result<SdsResult> {
    config.validate()?;
    cloud.validate()?;
    edited.validate()?;
    rig.validate()?;
    if edited.resolution() != rig.resolution {
        return Err(Error::Validation("edited views and rig resolution differ".into()));
    }
    let extent = cloud.radius().max(1e-6);
    let mut cloud = cloud.clone();
    let mut opt = CloudOptimizer::new(&cloud, &config.lr);
    let mut stats = GradStats::new(cloud.len());
    let mut log = Vec::with_capacity(config.iterations);
    let mut streak = 0;
    for iter in 0..config.iterations {
        let step = sds_step(&cloud, backend, edited, rig, loss, config, iter, rng)?;
        let finite = step.grad.is_finite() && step.perceptual.is_finite();
        log.push(SdsLogEntry {
            iter,
            t_max: config.t_max(iter),
            sample: step.sample,
            perceptual: step.perceptual,
            residual_rms: step.residual_rms,
            gaussians: cloud.len(),
            skipped: !finite,
        });
        if !finite {
            streak += 1;
            log::warn!("score distillation: non-finite gradient at iteration {iter}, step skipped");
            if streak >= config.max_nan_streak {
                return Err(Error::Numeric {
                    step: iter,
                    message: format!("{streak} consecutive non-finite gradients"),
                });
            }
            continue;
        }
        streak = 0;
        opt.step(&mut cloud, &step.grad);
        for vis in &step.visible {
            stats.record(&step.grad.mean2d, vis.iter().copied());
        }
        if (iter + 1) % config.densify.interval == 0 {
            let out = densify_prune(&cloud, &stats, &config.densify, extent, iter + 1 < config.densify.until);
            if out.cloned + out.split + out.pruned > 0 {
                log::info!(
                    "density control at {}: {} cloned, {} split, {} pruned",
                    iter + 1,
                    out.cloned,
                    out.split,
                    out.pruned
                );
            }
            opt.remap(&out.origin);
            cloud = out.cloud;
            stats = GradStats::new(cloud.len());
        }
    }
    Ok(SdsResult { cloud, log })
}
