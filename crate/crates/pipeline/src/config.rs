//! Run configuration. Every field has a default, so a JSON file only needs
//! the paths and whatever it overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use splatdrag_core::guidance::GuidanceConfig;
use splatdrag_core::refine::{DeformConfig, SdsConfig};
use splatdrag_core::RigConfig;

use crate::error::{PipelineError, Result};

/// Prefix selecting an externally provided model instead of a built-in one.
pub const ADAPTER_PREFIX: &str = "adapter:";

/// Backend choices by name. Built-ins are hermetic analytic stand-ins;
/// `adapter:<spec>` names an external model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Backends {
    /// View editor: `mixture` (single Gaussian around the input views).
    pub denoiser: String,
    /// `unproj` (one Gaussian per foreground pixel at its depth).
    pub reconstructor: String,
    /// `l2` (mean squared pixel error).
    pub perceptual: String,
    /// Score-distillation prior: `deformed` (renders of the deformation
    /// stage output from the sampled cameras).
    pub prior: String,
}

impl Default for Backends {
    fn default() -> Self {
        Self {
            denoiser: "mixture".into(),
            reconstructor: "unproj".into(),
            perceptual: "l2".into(),
            prior: "deformed".into(),
        }
    }
}

impl Backends {
    fn validate(&self) -> Result<()> {
        for (kind, value, builtin) in [
            ("denoiser", &self.denoiser, "mixture"),
            ("reconstructor", &self.reconstructor, "unproj"),
            ("perceptual", &self.perceptual, "l2"),
            ("prior", &self.prior, "deformed"),
        ] {
            check_backend(kind, value, builtin)?;
        }
        Ok(())
    }
}

pub(crate) fn check_backend(kind: &str, value: &str, builtin: &str) -> Result<()> {
    match value.strip_prefix(ADAPTER_PREFIX) {
        Some(spec) if !spec.trim().is_empty() => Ok(()),
        Some(_) => Err(PipelineError::Config(format!("{kind} adapter needs a spec after `{ADAPTER_PREFIX}`"))),
        None if value == builtin => Ok(()),
        None => Err(PipelineError::Config(format!("unknown {kind} backend `{value}` (expected `{builtin}` or `{ADAPTER_PREFIX}<spec>`)"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// `.ply` splat file or `.obj` mesh.
    pub asset: PathBuf,
    /// DragSet JSON with 3D pairs.
    pub drags: PathBuf,
    pub output: PathBuf,
    /// Seeds every stochastic stage, including the deformation nets.
    pub seed: u64,
    /// Rig for rendering, editing and evaluation.
    pub rig: RigConfig,
    /// Resolution for reconstruction and both refinement stages. Must
    /// divide the rig resolution.
    pub refine_resolution: usize,
    pub backends: Backends,
    /// Width of the built-in mixture denoiser around the input views.
    pub mixture_sigma: f64,
    pub guidance: GuidanceConfig,
    pub deform: DeformConfig,
    pub sds: SdsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            asset: PathBuf::new(),
            drags: PathBuf::new(),
            output: PathBuf::new(),
            seed: 0,
            rig: RigConfig::default(),
            refine_resolution: 128,
            backends: Backends::default(),
            mixture_sigma: 0.05,
            guidance: GuidanceConfig::default(),
            deform: DeformConfig::default(),
            sds: SdsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| PipelineError::Config(format!("{}: {}", e.path(), e.inner())))
    }

    /// Checks everything that can be checked without running a stage,
    /// including that the referenced input files exist.
    pub fn validate(&self) -> Result<()> {
        for (name, path) in [("asset", &self.asset), ("drags", &self.drags)] {
            if path.as_os_str().is_empty() {
                return Err(PipelineError::Config(format!("{name} path is required")));
            }
            if !path.is_file() {
                return Err(PipelineError::Config(format!("{name} file {} does not exist", path.display())));
            }
        }
        if self.output.as_os_str().is_empty() {
            return Err(PipelineError::Config("output directory is required".into()));
        }
        self.rig.validate()?;
        let (r, rr) = (self.rig.resolution, self.refine_resolution);
        if rr == 0 || r % rr != 0 {
            return Err(PipelineError::Config(format!("refine_resolution {rr} must divide the rig resolution {r}")));
        }
        if !(self.mixture_sigma > 0.0 && self.mixture_sigma.is_finite()) {
            return Err(PipelineError::Config(format!("mixture_sigma {} must be positive", self.mixture_sigma)));
        }
        if !(self.deform.lr > 0.0) {
            return Err(PipelineError::Config(format!("deform.lr {} must be positive", self.deform.lr)));
        }
        self.guidance.validate()?;
        self.sds.validate()?;
        self.backends.validate()
    }

    /// The rig used for reconstruction and refinement.
    pub fn refine_rig(&self) -> RigConfig {
        self.rig.with_resolution(self.refine_resolution)
    }
}
