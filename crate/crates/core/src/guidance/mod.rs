//! Multi-view drag editing by energy-guided DDIM sampling.

pub mod backend;
pub mod ddim;
pub mod energy;
pub mod masks;
pub mod mixture;
pub mod schedule;
pub mod target;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::drag::DragSet;
use crate::error::{Error, Result};
use crate::views::{MultiViewImageSet, ViewImage};

pub use backend::{Condition, DenoiserBackend, Features, LatentStack, Prediction};
pub use ddim::{cfg_epsilon, ddim_invert, ddim_sample, guided_sample, Inversion, SampleOptions, StepLog};
pub use energy::{energy_content, energy_edit, DragEnergy, GuidanceEnergy, TargetEnergy};
pub use masks::{build_masks, EnergyMasks};
pub use mixture::{images_to_latent, latent_to_images, AnalyticMixtureBackend};
pub use schedule::NoiseSchedule;
pub use target::TargetRenderBackend;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub cfg_scale: f64,
    pub ddim_steps: usize,
    pub bg_noise_std: f64,
    pub prompt: Option<String>,
    /// Fixed-point iterations per inversion step (0 = plain inversion).
    /// Each iteration re-evaluates the noise prediction at the destination
    /// latent, shrinking the mismatch with the sampling step.
    pub inversion_refinement: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            alpha: 8.0,
            beta: 4.0,
            cfg_scale: 5.0,
            ddim_steps: 150,
            bg_noise_std: 0.01,
            prompt: None,
            inversion_refinement: 2,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ddim_steps == 0 {
            return Err(Error::Validation("ddim_steps must be at least 1".into()));
        }
        if !(self.bg_noise_std >= 0.0) {
            return Err(Error::Validation(format!("bg_noise_std {} must be >= 0", self.bg_noise_std)));
        }
        for (name, v) in [("eta", self.eta), ("alpha", self.alpha), ("beta", self.beta), ("cfg_scale", self.cfg_scale)] {
            if !v.is_finite() {
                return Err(Error::Validation(format!("{name} must be finite")));
            }
        }
        Ok(())
    }

    pub fn condition(&self) -> Condition {
        self.prompt.clone().map_or_else(Condition::unconditional, Condition::text)
    }
}

/// Adds i.i.d. `N(0, std²)` noise to every channel of background pixels
/// (alpha < 0.5), clamped to `[0, 1]`. Foreground pixels are untouched.
pub fn perturb_background(images: &MultiViewImageSet, std: f64, rng: &mut impl Rng) -> Result<MultiViewImageSet> {
    if !(std >= 0.0) {
        return Err(Error::Validation(format!("noise std {std} must be >= 0")));
    }
    let mut out = images.clone();
    if std == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::Validation(e.to_string()))?;
    for view in &mut out.views {
        let r = view.resolution();
        for y in 0..r {
            for x in 0..r {
                if view.alpha[[y, x]] < 0.5 {
                    for c in 0..3 {
                        let v = &mut view.rgb[[y, x, c]];
                        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DragEditResult {
    pub edited: MultiViewImageSet,
    pub log: Vec<StepLog>,
}

/// The full view-editing stage: perturb the background, encode, invert,
/// then resample under the drag energy. Edited views keep the original
/// depth and alpha (the editor produces color only).
pub fn drag_edit(
    views: &MultiViewImageSet,
    drags: &DragSet,
    backend: &dyn DenoiserBackend,
    config: &GuidanceConfig,
    rng: &mut impl Rng,
) -> Result<DragEditResult> {
    config.validate()?;
    let cond = config.condition();
    let noisy = perturb_background(views, config.bg_noise_std, rng)?;
    let z0 = backend.encode(&noisy)?;
    let inv = ddim_invert(&z0, backend, config.ddim_steps, &cond, config.inversion_refinement)?;
    let masks = build_masks(drags, views.resolution(), &backend.feature_strides())?;
    let energy = DragEnergy {
        masks,
        alpha: config.alpha,
        beta: config.beta,
    };
    let opts = SampleOptions {
        cond: &cond,
        cfg_scale: config.cfg_scale,
        eta: config.eta,
        energy: Some(&energy),
    };
    let (z, log) = guided_sample(&inv, backend, &opts)?;
    let images = backend.decode(&z)?;
    let edited_views = images
        .into_iter()
        .zip(&views.views)
        .map(|(rgb, orig)| {
            if rgb.dim() != orig.rgb.dim() {
                return Err(Error::Backend(format!("decoded view {:?} vs input {:?}", rgb.dim(), orig.rgb.dim())));
            }
            Ok(ViewImage {
                rgb,
                depth: orig.depth.clone(),
                alpha: orig.alpha.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DragEditResult {
        edited: MultiViewImageSet::new(views.azimuths, edited_views)?,
        log,
    })
}
