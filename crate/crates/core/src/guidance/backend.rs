//! The denoiser interface the sampler, guidance energies and score
//! distillation are written against.

use ndarray::{Array3, Array4};

use crate::error::{Error, Result};
use crate::guidance::schedule::NoiseSchedule;
use crate::views::MultiViewImageSet;

/// A `4 × H × W × C` multi-view latent at timestep `t` (`None` when clean).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStack {
    pub data: Array4<f64>,
    pub t: Option<usize>,
}

impl LatentStack {
    pub fn new(data: Array4<f64>, t: Option<usize>) -> Result<Self> {
        let stack = Self { data, t };
        stack.validate(0)?;
        Ok(stack)
    }

    /// Fails with a numeric error tagged `step` on a wrong view count or a
    /// non-finite entry.
    pub fn validate(&self, step: usize) -> Result<()> {
        if self.data.dim().0 != 4 {
            return Err(Error::Validation(format!("latent stack has {} views", self.data.dim().0)));
        }
        if let Some(v) = self.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                step,
                message: format!("non-finite latent value {v}"),
            });
        }
        Ok(())
    }
}

/// Conditioning passed through to the backend untouched. `image` carries the
/// reference view for image-conditioned backends; `azimuths` are the camera
/// azimuths (degrees) of the four latent views when they differ from the
/// canonical rig.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Condition {
    pub text: Option<String>,
    pub image: Option<Array3<f64>>,
    pub azimuths: Option<[f64; 4]>,
}

impl Condition {
    pub fn unconditional() -> Self {
        Self::default()
    }

    pub fn text(prompt: impl Into<String>) -> Self {
        Self {
            text: Some(prompt.into()),
            ..Self::default()
        }
    }

    pub fn image(image: Array3<f64>) -> Self {
        Self {
            image: Some(image),
            ..Self::default()
        }
    }

    pub fn with_azimuths(mut self, azimuths: [f64; 4]) -> Self {
        self.azimuths = Some(azimuths);
        self
    }

    /// True when neither text nor image is given; camera azimuths are
    /// geometry, not content, and do not count.
    pub fn is_unconditional(&self) -> bool {
        self.text.is_none() && self.image.is_none()
    }

    /// The unconditional counterpart for classifier-free guidance: content
    /// dropped, cameras kept.
    pub fn dropped(&self) -> Self {
        Self {
            azimuths: self.azimuths,
            ..Self::default()
        }
    }
}

/// Per-layer feature maps, each `4 × h × w × c`, and the stride of each
/// layer relative to image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub layers: Vec<Array4<f64>>,
    pub strides: Vec<usize>,
}

impl Features {
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Array4::zeros(l.dim())).collect(),
            strides: self.strides.clone(),
        }
    }
}

pub struct Prediction {
    pub epsilon: Array4<f64>,
    pub features: Features,
}

/// A noise-predicting denoiser over four-view latents with a latent codec.
pub trait DenoiserBackend: Send + Sync {
    fn schedule(&self) -> &NoiseSchedule;

    /// Image-pixel stride of each feature layer.
    fn feature_strides(&self) -> Vec<usize>;

    fn encode(&self, images: &MultiViewImageSet) -> Result<Array4<f64>>;

    /// Pulls a latent-space gradient back to the four input images.
    fn encode_vjp(&self, images: &MultiViewImageSet, grad: &Array4<f64>) -> Result<Vec<Array3<f64>>>;

    /// Decodes a clean latent to four `H × W × 3` images in `[0, 1]`.
    fn decode(&self, z: &Array4<f64>) -> Result<Vec<Array3<f64>>>;

    fn predict(&self, z: &Array4<f64>, t: usize, cond: &Condition) -> Result<Prediction>;

    /// Features only; backends may override when cheaper than `predict`.
    fn features(&self, z: &Array4<f64>, t: usize, cond: &Condition) -> Result<Features> {
        Ok(self.predict(z, t, cond)?.features)
    }

    /// Vector-Jacobian product of the feature map at `z`: returns
    /// `Σ_ℓ (∂F_ℓ/∂z)ᵀ grad_ℓ`.
    fn features_vjp(&self, z: &Array4<f64>, t: usize, cond: &Condition, grad: &Features) -> Result<Array4<f64>>;
}
