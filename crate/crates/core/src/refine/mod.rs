//! Refinement of the fused cloud: deformation fields for alignment, then
//! image-conditioned score distillation over every Gaussian parameter.

pub mod deform;
pub mod densify;
pub mod fourier;
pub mod loss;
pub mod optim;
pub mod sds;

pub use deform::{optimize_positions, DeformConfig, DeformResult, DeformationNet};
pub use densify::{densify_prune, DensifyConfig, GradStats};
pub use fourier::{embedding_dim, fourier_embed};
pub use loss::{PerceptualLoss, PixelL2};
pub use optim::{Adam, Optimizer, OptimizerKind};
pub use sds::{refine_sds, sds_step, LearningRates, SdsConfig, SdsLogEntry, SdsResult};
