//! The seven pipeline stages. Each reads its inputs from the run directory
//! and writes its outputs there, so any stage can resume from disk.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use splatdrag_core::drag::{load_dragset, save_dragset};
use splatdrag_core::dragproject::{depth_tolerance, project_pairs};
use splatdrag_core::guidance::{drag_edit, images_to_latent, AnalyticMixtureBackend, DenoiserBackend, TargetRenderBackend};
use splatdrag_core::metrics::{dai_report, DaiReport};
use splatdrag_core::ply::{load_gaussians, save_gaussians};
use splatdrag_core::reconstruct::{regress_and_fuse, DepthUnprojection, ReconstructorBackend};
use splatdrag_core::refine::{optimize_positions, refine_sds, PerceptualLoss, PixelL2};
use splatdrag_core::render::render_rig;
use splatdrag_core::{asset::load_asset, Asset, DragSet, Error, GaussianCloud, MultiViewImageSet, RigConfig};

use crate::config::{RunConfig, ADAPTER_PREFIX};
use crate::error::{PipelineError, Result};
use crate::manifest::Stage;

pub const VIEWS_DIR: &str = "views";
pub const EDITED_DIR: &str = "edited";
pub const FINAL_VIEWS_DIR: &str = "final_views";
pub const PROJECTED: &str = "projected.json";
pub const GUIDANCE_LOG: &str = "guidance_log.json";
pub const FUSED: &str = "fused.ply";
pub const DEFORMED: &str = "deformed.ply";
pub const DEFORM_LOG: &str = "deform_log.json";
pub const FINAL: &str = "final.ply";
pub const SDS_LOG: &str = "sds_log.json";
pub const DAI: &str = "dai.json";
/// Scores of the 2D edits themselves, before reconstruction.
pub const DAI_EDITED: &str = "dai_edited.json";

/// Files written by [`MultiViewImageSet::save`] under `dir`.
pub fn view_files(dir: &str) -> Vec<String> {
    let mut names: Vec<String> = (0..4)
        .flat_map(|i| ["view", "rgb", "depth", "alpha"].map(|k| format!("{dir}/{k}_{i}.{}", if k == "view" { "png" } else { "raw" })))
        .collect();
    names.push(format!("{dir}/views.json"));
    names
}

/// Per-stage seed derived from the run seed.
pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
    seed ^ (stage.index() as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn adapter_unavailable(kind: &str, spec: &str) -> Error {
    Error::Backend(format!(
        "{kind} adapter `{spec}` is not linked into this build; implement the {kind} trait for the external model and register it"
    ))
}

fn unknown(kind: &str, name: &str) -> Error {
    Error::Backend(format!("unknown {kind} backend `{name}`"))
}

/// The view editor. `mixture` is an exact denoiser for a single Gaussian
/// of width `sigma` around the input views.
pub fn denoiser(name: &str, views: &MultiViewImageSet, sigma: f64) -> splatdrag_core::Result<Box<dyn DenoiserBackend>> {
    match name {
        "mixture" => Ok(Box::new(AnalyticMixtureBackend::around(images_to_latent(views), sigma)?)),
        s => Err(s.strip_prefix(ADAPTER_PREFIX).map_or_else(|| unknown("denoiser", s), |spec| adapter_unavailable("denoiser", spec))),
    }
}

pub fn reconstructor(name: &str) -> splatdrag_core::Result<Box<dyn ReconstructorBackend>> {
    match name {
        "unproj" => Ok(Box::new(DepthUnprojection::default())),
        s => Err(s.strip_prefix(ADAPTER_PREFIX).map_or_else(|| unknown("reconstructor", s), |spec| adapter_unavailable("reconstructor", spec))),
    }
}

pub fn perceptual(name: &str) -> splatdrag_core::Result<Box<dyn PerceptualLoss>> {
    match name {
        "l2" => Ok(Box::new(PixelL2)),
        s => Err(s.strip_prefix(ADAPTER_PREFIX).map_or_else(|| unknown("perceptual", s), |spec| adapter_unavailable("perceptual", spec))),
    }
}

/// The score-distillation prior. `deformed` renders the given cloud from
/// whatever cameras are sampled, so distillation keeps novel views
/// consistent with the deformation result.
pub fn prior(name: &str, deformed: &GaussianCloud, rig: RigConfig) -> splatdrag_core::Result<Box<dyn DenoiserBackend>> {
    match name {
        "deformed" => Ok(Box::new(TargetRenderBackend::new(deformed.clone(), rig)?)),
        s => Err(s.strip_prefix(ADAPTER_PREFIX).map_or_else(|| unknown("prior", s), |spec| adapter_unavailable("prior", spec))),
    }
}

/// Projects drags onto views rendered from an asset of the given radius.
pub fn project(drags: &DragSet, views: &MultiViewImageSet, rig: &RigConfig, radius: f64) -> splatdrag_core::Result<DragSet> {
    project_pairs(drags, views, rig, depth_tolerance(radius))
}

/// Regresses the edited views at the refinement resolution.
pub fn reconstruct(edited: &MultiViewImageSet, rig: &RigConfig, backend: &dyn ReconstructorBackend) -> splatdrag_core::Result<GaussianCloud> {
    let factor = edited.resolution() / rig.resolution.max(1);
    regress_and_fuse(&edited.downsample(factor)?, rig, backend)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| PipelineError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[derive(Serialize)]
struct DeformLog<'a> {
    losses: &'a [f64],
}

pub fn evaluate(original: &MultiViewImageSet, edited: &MultiViewImageSet, projected: &DragSet) -> splatdrag_core::Result<DaiReport> {
    dai_report(original, edited, projected)
}

/// Runs one stage inside run directory `dir`; returns its output names.
pub fn execute(stage: Stage, dir: &Path, config: &RunConfig) -> Result<Vec<String>> {
    let seed = stage_seed(config.seed, stage);
    let refine_rig = config.refine_rig();
    let targets = || -> Result<MultiViewImageSet> {
        let edited = MultiViewImageSet::load(dir.join(EDITED_DIR))?;
        Ok(edited.downsample(edited.resolution() / config.refine_resolution)?)
    };
    match stage {
        Stage::Render => {
            let asset = load_asset(&config.asset)?;
            render_rig(&asset, &config.rig)?.save(dir.join(VIEWS_DIR))?;
            Ok(view_files(VIEWS_DIR))
        }
        Stage::Project => {
            let views = MultiViewImageSet::load(dir.join(VIEWS_DIR))?;
            let radius = load_asset(&config.asset)?.radius();
            let projected = project(&load_dragset(&config.drags)?, &views, &config.rig, radius)?;
            save_dragset(&projected, dir.join(PROJECTED))?;
            Ok(vec![PROJECTED.into()])
        }
        Stage::Drag => {
            let views = MultiViewImageSet::load(dir.join(VIEWS_DIR))?;
            let projected = load_dragset(dir.join(PROJECTED))?;
            let backend = denoiser(&config.backends.denoiser, &views, config.mixture_sigma)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = drag_edit(&views, &projected, backend.as_ref(), &config.guidance, &mut rng)?;
            out.edited.save(dir.join(EDITED_DIR))?;
            write_json(&dir.join(GUIDANCE_LOG), &out.log)?;
            let mut names = view_files(EDITED_DIR);
            names.push(GUIDANCE_LOG.into());
            Ok(names)
        }
        Stage::Reconstruct => {
            let edited = MultiViewImageSet::load(dir.join(EDITED_DIR))?;
            let backend = reconstructor(&config.backends.reconstructor)?;
            let fused = reconstruct(&edited, &refine_rig, backend.as_ref())?;
            log::info!("fused {} Gaussians", fused.len());
            save_gaussians(&fused, dir.join(FUSED))?;
            Ok(vec![FUSED.into()])
        }
        Stage::Deform => {
            let fused = load_gaussians(dir.join(FUSED))?;
            let loss = perceptual(&config.backends.perceptual)?;
            let mut deform = config.deform.clone();
            deform.seed = seed;
            let out = optimize_positions(&fused, &targets()?, &refine_rig, loss.as_ref(), &deform)?;
            save_gaussians(&out.cloud, dir.join(DEFORMED))?;
            write_json(&dir.join(DEFORM_LOG), &DeformLog { losses: &out.losses })?;
            Ok(vec![DEFORMED.into(), DEFORM_LOG.into()])
        }
        Stage::Sds => {
            let deformed = load_gaussians(dir.join(DEFORMED))?;
            let loss = perceptual(&config.backends.perceptual)?;
            let backend = prior(&config.backends.prior, &deformed, refine_rig)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = refine_sds(&deformed, backend.as_ref(), &targets()?, &refine_rig, loss.as_ref(), &config.sds, &mut rng)?;
            save_gaussians(&out.cloud, dir.join(FINAL))?;
            write_json(&dir.join(SDS_LOG), &out.log)?;
            Ok(vec![FINAL.into(), SDS_LOG.into()])
        }
        Stage::Evaluate => {
            let original = MultiViewImageSet::load(dir.join(VIEWS_DIR))?;
            let edited = MultiViewImageSet::load(dir.join(EDITED_DIR))?;
            let projected = load_dragset(dir.join(PROJECTED))?;
            let final_cloud = load_gaussians(dir.join(FINAL))?;
            let renders = render_rig(&Asset::Gaussians(final_cloud), &config.rig)?;
            renders.save(dir.join(FINAL_VIEWS_DIR))?;
            write_json(&dir.join(DAI), &evaluate(&original, &renders, &projected)?)?;
            write_json(&dir.join(DAI_EDITED), &evaluate(&original, &edited, &projected)?)?;
            let mut names = view_files(FINAL_VIEWS_DIR);
            names.extend([DAI.to_string(), DAI_EDITED.to_string()]);
            Ok(names)
        }
    }
}
