//! Rasterizers for the two asset kinds and the four-view rig render.

pub mod mesh;
pub mod splat;

use crate::camera::RigConfig;
use crate::cloud::GaussianCloud;
use crate::error::Result;
use crate::mesh::TriMesh;
use crate::views::MultiViewImageSet;

pub use crate::views::ViewImage as RenderOutput;
pub use mesh::rasterize_mesh;
pub use splat::{rasterize_gaussians, CloudGrad, Projection};

/// Anything the rig can render.
#[derive(Debug, Clone)]
pub enum Asset {
    Gaussians(GaussianCloud),
    Mesh(TriMesh),
}

impl Asset {
    pub fn render(&self, camera: &crate::camera::Camera, background: f64) -> Result<RenderOutput> {
        match self {
            Asset::Gaussians(c) => rasterize_gaussians(c, camera, background),
            Asset::Mesh(m) => rasterize_mesh(m, camera, background),
        }
    }

    /// Largest distance of any point from the origin.
    pub fn radius(&self) -> f64 {
        match self {
            Asset::Gaussians(c) => c.radius(),
            Asset::Mesh(m) => m.vertices.iter().map(|v| v.norm()).fold(0.0, f64::max),
        }
    }
}

/// Renders the asset from each rig camera, in rig azimuth order.
pub fn render_rig(asset: &Asset, rig: &RigConfig) -> Result<MultiViewImageSet> {
    rig.validate()?;
    let views = rig
        .cameras()?
        .iter()
        .map(|cam| asset.render(cam, rig.background))
        .collect::<Result<Vec<_>>>()?;
    MultiViewImageSet::new(rig.azimuths, views)
}
