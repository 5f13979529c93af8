//! A camera-conditioned denoiser whose data distribution is a single point:
//! the renders of a fixed target scene from the requested azimuths. Its
//! noise prediction `(z − √ᾱ z*)/√(1−ᾱ)` is exact, so score distillation
//! against it pulls renders straight toward the target.

use ndarray::{Array3, Array4};

use crate::camera::RigConfig;
use crate::cloud::GaussianCloud;
use crate::error::{Error, Result};
use crate::guidance::backend::{Condition, DenoiserBackend, Features, Prediction};
use crate::guidance::mixture::{identity_encode_vjp, images_to_latent, latent_to_images};
use crate::guidance::schedule::NoiseSchedule;
use crate::render::{render_rig, Asset};
use crate::views::MultiViewImageSet;

pub struct TargetRenderBackend {
    target: Asset,
    rig: RigConfig,
    schedule: NoiseSchedule,
}

impl TargetRenderBackend {
    pub fn new(target: GaussianCloud, rig: RigConfig) -> Result<Self> {
        target.validate()?;
        rig.validate()?;
        Ok(Self {
            target: Asset::Gaussians(target),
            rig,
            schedule: NoiseSchedule::latent_diffusion(),
        })
    }

    /// Clean target latent for the azimuths in `cond` (canonical rig if none).
    pub fn target_latent(&self, cond: &Condition) -> Result<Array4<f64>> {
        let mut rig = self.rig;
        if let Some(az) = cond.azimuths {
            rig.azimuths = az;
        }
        Ok(images_to_latent(&render_rig(&self.target, &rig)?))
    }

    fn check(&self, z: &Array4<f64>, t: usize) -> Result<()> {
        let r = self.rig.resolution;
        if z.dim() != (4, r, r, 3) {
            return Err(Error::Validation(format!("latent {:?} does not match {r}px target", z.dim())));
        }
        if t >= self.schedule.len() {
            return Err(Error::Validation(format!("timestep {t} outside schedule")));
        }
        Ok(())
    }
}

impl DenoiserBackend for TargetRenderBackend {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn feature_strides(&self) -> Vec<usize> {
        vec![1]
    }

    fn encode(&self, images: &MultiViewImageSet) -> Result<Array4<f64>> {
        Ok(images_to_latent(images))
    }

    fn encode_vjp(&self, images: &MultiViewImageSet, grad: &Array4<f64>) -> Result<Vec<Array3<f64>>> {
        identity_encode_vjp(images, grad)
    }

    fn decode(&self, z: &Array4<f64>) -> Result<Vec<Array3<f64>>> {
        Ok(latent_to_images(z))
    }

    fn predict(&self, z: &Array4<f64>, t: usize, cond: &Condition) -> Result<Prediction> {
        self.check(z, t)?;
        let ab = self.schedule.alpha_bar(t);
        let target = self.target_latent(cond)?;
        let epsilon = (z - &(target * ab.sqrt())) / (1.0 - ab).sqrt();
        Ok(Prediction {
            epsilon,
            features: Features {
                layers: vec![z.clone()],
                strides: vec![1],
            },
        })
    }

    fn features_vjp(&self, z: &Array4<f64>, t: usize, _cond: &Condition, grad: &Features) -> Result<Array4<f64>> {
        self.check(z, t)?;
        grad.layers
            .first()
            .cloned()
            .ok_or_else(|| Error::Validation("feature gradient has no layers".into()))
    }
}
