//! Orchestration for the splat drag-editing pipeline: run configuration,
//! resumable manifests, the staged runner, and the HTTP service used by the
//! annotation front end.

pub mod config;
pub mod error;
pub mod lock;
pub mod manifest;
pub mod run;
pub mod service;
pub mod stages;

pub use config::{Backends, RunConfig};
pub use error::{PipelineError, Result};
pub use manifest::{Artifact, RunManifest, Stage, StageRecord, StageStatus};
pub use run::{run_pipeline, run_pipeline_with};
