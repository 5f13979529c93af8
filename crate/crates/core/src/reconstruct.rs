//! Four views to one Gaussian cloud: per-view regression, then fusion by
//! concatenation. Overlap between the partial clouds is left alone; the
//! deformation stage is what pulls misaligned copies together.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::camera::RigConfig;
use crate::cloud::GaussianCloud;
use crate::error::{Error, Result};
use crate::views::MultiViewImageSet;

/// A multi-view regressor producing one partial cloud per rig view. Every
/// returned cloud carries `view_ids`, all equal to its view index.
pub trait ReconstructorBackend: Send + Sync {
    fn name(&self) -> &str;
    fn regress(&self, views: &MultiViewImageSet, rig: &RigConfig) -> Result<Vec<GaussianCloud>>;
}

/// Runs the backend and concatenates its four clouds in view order.
pub fn regress_and_fuse(views: &MultiViewImageSet, rig: &RigConfig, backend: &dyn ReconstructorBackend) -> Result<GaussianCloud> {
    views.validate()?;
    rig.validate()?;
    let parts = backend.regress(views, rig)?;
    if parts.len() != 4 {
        return Err(Error::Backend(format!("{} returned {} clouds, expected 4", backend.name(), parts.len())));
    }
    let degree = parts[0].sh_degree;
    let mut fused = GaussianCloud::empty(degree);
    fused.view_ids = Some(Vec::new());
    for (i, part) in parts.iter().enumerate() {
        part.validate()?;
        match &part.view_ids {
            Some(ids) if ids.iter().all(|&v| v as usize == i) => {}
            _ => {
                return Err(Error::Backend(format!(
                    "{}: cloud {i} is not tagged with view_id {i}",
                    backend.name()
                )))
            }
        }
        fused.extend(part)?;
    }
    Ok(fused)
}

/// Hermetic stand-in for a learned regressor: one isotropic Gaussian per
/// foreground pixel, placed at the pixel's unprojected depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthUnprojection {
    /// Pixels with alpha at or above this are foreground.
    pub alpha_threshold: f64,
    /// Gaussian sigma in units of the pixel footprint at its depth.
    pub footprint_scale: f64,
    pub opacity: f64,
    /// Rigid per-view displacement added to every produced position, for
    /// synthesizing misaligned partial clouds.
    pub offsets: [Vector3<f64>; 4],
}

impl Default for DepthUnprojection {
    fn default() -> Self {
        Self {
            alpha_threshold: 0.5,
            footprint_scale: 0.7,
            opacity: 0.95,
            offsets: [Vector3::zeros(); 4],
        }
    }
}

impl DepthUnprojection {
    pub fn with_offsets(mut self, offsets: [Vector3<f64>; 4]) -> Self {
        self.offsets = offsets;
        self
    }
}

impl ReconstructorBackend for DepthUnprojection {
    fn name(&self) -> &str {
        "unproj"
    }

    fn regress(&self, views: &MultiViewImageSet, rig: &RigConfig) -> Result<Vec<GaussianCloud>> {
        if !(self.opacity > 0.0 && self.opacity < 1.0) {
            return Err(Error::Validation(format!("opacity {} must lie in (0, 1)", self.opacity)));
        }
        if !(self.footprint_scale > 0.0) {
            return Err(Error::Validation("footprint_scale must be positive".into()));
        }
        let cameras = rig.cameras()?;
        (0..4)
            .into_par_iter()
            .map(|i| {
                let view = &views.views[i];
                let cam = &cameras[i];
                let mut cloud = GaussianCloud::empty(0);
                let r = view.resolution();
                for y in 0..r {
                    for x in 0..r {
                        if view.alpha[[y, x]] < self.alpha_threshold {
                            continue;
                        }
                        let d = view.depth[[y, x]];
                        if !(d.is_finite() && d > 0.0) {
                            return Err(Error::Validation(format!(
                                "view {i} pixel ({x}, {y}) is foreground but has no depth"
                            )));
                        }
                        let rgb = [view.rgb[[y, x, 0]], view.rgb[[y, x, 1]], view.rgb[[y, x, 2]]];
                        let pos = cam.unproject(x as f64, y as f64, d) + self.offsets[i];
                        cloud.push_isotropic(pos, self.footprint_scale * cam.pixel_footprint(d), self.opacity, rgb);
                    }
                }
                cloud.view_ids = Some(vec![i as u8; cloud.len()]);
                Ok(cloud)
            })
            .collect()
    }
}
