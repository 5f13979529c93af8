//! Image losses for the refinement stages.

use ndarray::Array3;

use crate::error::{Error, Result};

/// A differentiable image distance: returns `loss(a, b)` and `∂loss/∂a`.
/// Implementations satisfy `loss(a, a) = 0` and `loss >= 0`.
pub trait PerceptualLoss: Send + Sync {
    fn name(&self) -> &str;
    fn loss(&self, a: &Array3<f64>, b: &Array3<f64>) -> Result<(f64, Array3<f64>)>;
}

/// Mean squared pixel error, the stand-in when no pretrained perceptual
/// network is available.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelL2;

impl PerceptualLoss for PixelL2 {
    fn name(&self) -> &str {
        "l2"
    }

    fn loss(&self, a: &Array3<f64>, b: &Array3<f64>) -> Result<(f64, Array3<f64>)> {
        if a.dim() != b.dim() {
            return Err(Error::Validation(format!("image shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
        }
        let n = a.len().max(1) as f64;
        let diff = a - b;
        let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
        Ok((value, diff * (2.0 / n)))
    }
}
