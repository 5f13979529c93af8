//! Drag-based editing of 3D Gaussian splat assets through four consistent
//! 2D edits.
//!
//! The pipeline renders an asset at four orthogonal azimuths, projects 3D
//! drag handles into each view, edits the views jointly with energy-guided
//! diffusion sampling, regresses and fuses per-view Gaussians, and refines
//! the result with per-view deformation fields and score distillation.
//! Learned components (denoiser, reconstructor, perceptual loss) are traits
//! with exact analytic implementations for testing.

pub mod asset;
pub mod camera;
pub mod cloud;
pub mod drag;
pub mod dragproject;
pub mod error;
pub mod guidance;
pub mod mesh;
pub mod metrics;
pub mod npy;
pub mod ply;
pub mod reconstruct;
pub mod refine;
pub mod render;
pub mod sh;
pub mod views;

pub use camera::{Camera, RigConfig};
pub use cloud::GaussianCloud;
pub use drag::{DragPair, DragSet, ProjectedPair};
pub use error::{Error, Result};
pub use mesh::TriMesh;
pub use render::{Asset, RenderOutput};
pub use views::{MultiViewImageSet, ViewImage};
