//! Exact denoiser for data drawn from an isotropic Gaussian mixture.
//!
//! Under the forward process `z_t = √ᾱ x + √(1-ᾱ) ε`, component `k` diffuses
//! to `N(√ᾱ μ_k, (ᾱ σ_k² + 1 - ᾱ) I)`, so the score of the noisy marginal and
//! hence the optimal `ε` prediction are available in closed form:
//!
//! `ε(z, t) = -√(1-ᾱ) ∇ log p_t(z) = √(1-ᾱ) Σ_k r_k(z) (z - √ᾱ μ_k) / v_k`.

use ndarray::{Array3, Array4, Axis, Zip};

use crate::error::{Error, Result};
use crate::guidance::backend::{Condition, DenoiserBackend, Features, Prediction};
use crate::guidance::schedule::NoiseSchedule;
use crate::views::MultiViewImageSet;

#[derive(Debug, Clone)]
pub struct AnalyticMixtureBackend {
    means: Vec<Array4<f64>>,
    log_weights: Vec<f64>,
    sigmas: Vec<f64>,
    schedule: NoiseSchedule,
    strides: Vec<usize>,
    view_mixing: f64,
}

impl AnalyticMixtureBackend {
    pub fn new(means: Vec<Array4<f64>>, weights: Vec<f64>, sigmas: Vec<f64>) -> Result<Self> {
        if means.is_empty() || means.len() != weights.len() || means.len() != sigmas.len() {
            return Err(Error::Validation("mixture needs matching non-empty means, weights and sigmas".into()));
        }
        let shape = means[0].dim();
        if shape.0 != 4 || means.iter().any(|m| m.dim() != shape) {
            return Err(Error::Validation("mixture means must share one 4-view shape".into()));
        }
        if means.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::Validation("mixture means must be finite".into()));
        }
        if let Some(s) = sigmas.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::Validation(format!("degenerate mixture sigma {s}")));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Validation("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        Ok(Self {
            means,
            log_weights: weights.iter().map(|w| (w / total).ln()).collect(),
            sigmas,
            schedule: NoiseSchedule::latent_diffusion(),
            strides: vec![1],
            view_mixing: 0.0,
        })
    }

    /// A single component of width `sigma` centered on `center`.
    pub fn around(center: Array4<f64>, sigma: f64) -> Result<Self> {
        Self::new(vec![center], vec![1.0], vec![sigma])
    }

    pub fn with_schedule(mut self, schedule: NoiseSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    /// Feature layers as average pools of the latent with these strides
    /// (stride 1 is the latent itself).
    pub fn with_feature_strides(mut self, strides: Vec<usize>) -> Result<Self> {
        if strides.is_empty() || strides.contains(&0) {
            return Err(Error::Validation("feature strides must be non-empty and positive".into()));
        }
        self.strides = strides;
        Ok(self)
    }

    /// Blends each view's features with the mean over views:
    /// `F_i ← (1-λ) F_i + λ mean_j F_j`. Couples the views the way a
    /// multi-view network's attention does.
    pub fn with_view_mixing(mut self, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Validation(format!("view mixing {lambda} outside [0,1]")));
        }
        self.view_mixing = lambda;
        Ok(self)
    }

    pub fn latent_shape(&self) -> (usize, usize, usize, usize) {
        self.means[0].dim()
    }

    fn check(&self, z: &Array4<f64>, t: usize) -> Result<()> {
        if z.dim() != self.latent_shape() {
            return Err(Error::Validation(format!("latent {:?} vs mixture {:?}", z.dim(), self.latent_shape())));
        }
        if t >= self.schedule.len() {
            return Err(Error::Validation(format!("timestep {t} outside schedule")));
        }
        Ok(())
    }

    /// Posterior responsibilities and per-component variances at `(z, ᾱ)`.
    fn responsibilities(&self, z: &Array4<f64>, ab: f64) -> (Vec<f64>, Vec<f64>) {
        let d = z.len() as f64;
        let sa = ab.sqrt();
        let vars: Vec<f64> = self.sigmas.iter().map(|s| ab * s * s + 1.0 - ab).collect();
        let logs: Vec<f64> = self
            .means
            .iter()
            .zip(&vars)
            .zip(&self.log_weights)
            .map(|((m, &v), &lw)| {
                let d2: f64 = Zip::from(z).and(m).fold(0.0, |acc, &zi, &mi| acc + (zi - sa * mi).powi(2));
                lw - 0.5 * d * v.ln() - 0.5 * d2 / v
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        (exps.iter().map(|e| e / sum).collect(), vars)
    }

    /// `∇_z log p_t(z)` at signal level `ᾱ`.
    pub fn score_at(&self, z: &Array4<f64>, ab: f64) -> Array4<f64> {
        let (r, vars) = self.responsibilities(z, ab);
        let sa = ab.sqrt();
        let mut score = Array4::zeros(z.dim());
        for ((m, &rk), &v) in self.means.iter().zip(&r).zip(&vars) {
            if rk == 0.0 {
                continue;
            }
            Zip::from(&mut score).and(z).and(m).for_each(|s, &zi, &mi| *s += rk * (sa * mi - zi) / v);
        }
        score
    }

    /// `log p_t(z)` at signal level `ᾱ`, including normalizing constants.
    pub fn log_density_at(&self, z: &Array4<f64>, ab: f64) -> f64 {
        let d = z.len() as f64;
        let sa = ab.sqrt();
        let logs: Vec<f64> = self
            .means
            .iter()
            .zip(&self.sigmas)
            .zip(&self.log_weights)
            .map(|((m, s), lw)| {
                let v = ab * s * s + 1.0 - ab;
                let d2: f64 = Zip::from(z).and(m).fold(0.0, |acc, &zi, &mi| acc + (zi - sa * mi).powi(2));
                lw - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln() - 0.5 * d2 / v
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
    }

    /// Draws an exact sample from the clean mixture.
    pub fn sample_clean(&self, rng: &mut impl rand::Rng) -> Array4<f64> {
        use rand::distr::weighted::WeightedIndex;
        use rand_distr::{Distribution, StandardNormal};
        let weights: Vec<f64> = self.log_weights.iter().map(|l| l.exp()).collect();
        let k = WeightedIndex::new(&weights).expect("weights validated").sample(rng);
        let s = self.sigmas[k];
        self.means[k].mapv(|m| {
            let n: f64 = StandardNormal.sample(rng);
            m + s * n
        })
    }

    fn pooled_features(&self, z: &Array4<f64>) -> Features {
        let layers = self
            .strides
            .iter()
            .map(|&s| {
                let pooled = pool(z, s);
                mix_views(&pooled, self.view_mixing)
            })
            .collect();
        Features {
            layers,
            strides: self.strides.clone(),
        }
    }
}

/// Average pooling over `s × s` blocks, partial blocks at the border included.
fn pool(z: &Array4<f64>, s: usize) -> Array4<f64> {
    if s == 1 {
        return z.clone();
    }
    let (v, h, w, c) = z.dim();
    let (ph, pw) = (h.div_ceil(s), w.div_ceil(s));
    let mut out = Array4::zeros((v, ph, pw, c));
    for ((vi, y, x, ch), &val) in z.indexed_iter() {
        out[[vi, y / s, x / s, ch]] += val;
    }
    for ((_, py, px, _), o) in out.indexed_iter_mut() {
        *o /= block_count(py, px, s, h, w);
    }
    out
}

fn block_count(py: usize, px: usize, s: usize, h: usize, w: usize) -> f64 {
    (((py + 1) * s).min(h) - py * s) as f64 * (((px + 1) * s).min(w) - px * s) as f64
}

/// Transpose of [`pool`].
fn unpool(g: &Array4<f64>, s: usize, h: usize, w: usize) -> Array4<f64> {
    if s == 1 {
        return g.clone();
    }
    let (v, _, _, c) = g.dim();
    Array4::from_shape_fn((v, h, w, c), |(vi, y, x, ch)| {
        g[[vi, y / s, x / s, ch]] / block_count(y / s, x / s, s, h, w)
    })
}

/// `(1-λ) F_i + λ mean_j F_j`; symmetric, so it is its own transpose.
fn mix_views(f: &Array4<f64>, lambda: f64) -> Array4<f64> {
    if lambda == 0.0 {
        return f.clone();
    }
    let mean = f.mean_axis(Axis(0)).expect("four views");
    let mut out = f * (1.0 - lambda);
    for mut view in out.outer_iter_mut() {
        view.scaled_add(lambda, &mean);
    }
    out
}

/// Identity encoding: the latent is the stacked RGB of the four views.
pub fn images_to_latent(images: &MultiViewImageSet) -> Array4<f64> {
    let r = images.resolution();
    Array4::from_shape_fn((4, r, r, 3), |(v, y, x, c)| images.views[v].rgb[[y, x, c]])
}

pub(crate) fn identity_encode_vjp(images: &MultiViewImageSet, grad: &Array4<f64>) -> Result<Vec<Array3<f64>>> {
    let r = images.resolution();
    if grad.dim() != (4, r, r, 3) {
        return Err(Error::Validation(format!("latent gradient {:?} does not match {r}px images", grad.dim())));
    }
    Ok(grad.outer_iter().map(|v| v.to_owned()).collect())
}

pub fn latent_to_images(z: &Array4<f64>) -> Vec<Array3<f64>> {
    z.outer_iter().map(|v| v.mapv(|x| x.clamp(0.0, 1.0))).collect()
}

impl DenoiserBackend for AnalyticMixtureBackend {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn feature_strides(&self) -> Vec<usize> {
        self.strides.clone()
    }

    fn encode(&self, images: &MultiViewImageSet) -> Result<Array4<f64>> {
        let z = images_to_latent(images);
        if z.dim() != self.latent_shape() {
            return Err(Error::Validation(format!(
                "images encode to {:?}, mixture expects {:?}",
                z.dim(),
                self.latent_shape()
            )));
        }
        Ok(z)
    }

    fn encode_vjp(&self, images: &MultiViewImageSet, grad: &Array4<f64>) -> Result<Vec<Array3<f64>>> {
        identity_encode_vjp(images, grad)
    }

    fn decode(&self, z: &Array4<f64>) -> Result<Vec<Array3<f64>>> {
        if z.dim().3 != 3 {
            return Err(Error::Validation("identity codec needs 3 latent channels".into()));
        }
        Ok(latent_to_images(z))
    }

    fn predict(&self, z: &Array4<f64>, t: usize, _cond: &Condition) -> Result<Prediction> {
        self.check(z, t)?;
        let ab = self.schedule.alpha_bar(t);
        let epsilon = self.score_at(z, ab) * -(1.0 - ab).sqrt();
        Ok(Prediction {
            epsilon,
            features: self.pooled_features(z),
        })
    }

    fn features(&self, z: &Array4<f64>, t: usize, _cond: &Condition) -> Result<Features> {
        self.check(z, t)?;
        Ok(self.pooled_features(z))
    }

    fn features_vjp(&self, z: &Array4<f64>, t: usize, _cond: &Condition, grad: &Features) -> Result<Array4<f64>> {
        self.check(z, t)?;
        if grad.layers.len() != self.strides.len() {
            return Err(Error::Validation("feature gradient layer count mismatch".into()));
        }
        let (_, h, w, _) = z.dim();
        let mut out = Array4::zeros(z.dim());
        for (g, &s) in grad.layers.iter().zip(&self.strides) {
            out += &unpool(&mix_views(g, self.view_mixing), s, h, w);
        }
        Ok(out)
    }
}
