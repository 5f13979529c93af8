use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use splatdrag::config::RunConfig;
use splatdrag::manifest::Stage;
use splatdrag::service::{self, ServiceConfig, ARTIFACT_ROOT_ENV};
use splatdrag::stages::{self, stage_seed, write_json};
use splatdrag::{run_pipeline, Result};
use splatdrag_core::asset::load_asset;
use splatdrag_core::drag::{load_dragset, save_dragset};
use splatdrag_core::guidance::drag_edit;
use splatdrag_core::ply::{load_gaussians, save_gaussians};
use splatdrag_core::refine::{optimize_positions, refine_sds};
use splatdrag_core::render::render_rig;
use splatdrag_core::MultiViewImageSet;

#[derive(Parser)]
#[command(name = "splatdrag", version, about = "Drag-based editing of Gaussian splat assets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the four rig views of an asset.
    Render {
        #[arg(long)]
        asset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
    },
    /// Project 3D drag pairs into rendered views with occlusion culling.
    Project {
        #[arg(long)]
        asset: PathBuf,
        #[arg(long)]
        views: PathBuf,
        #[arg(long)]
        drags: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Edit the four views jointly under the drag energy.
    Drag {
        #[arg(long)]
        views: PathBuf,
        #[arg(long)]
        proj: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run config supplying guidance and backend settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Regress and fuse Gaussians from edited views.
    Reconstruct {
        #[arg(long)]
        views: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `unproj` or `adapter:<spec>`.
        #[arg(long, default_value = "unproj")]
        backend: String,
        #[arg(long, default_value_t = 128)]
        resolution: usize,
    },
    /// Refine a fused cloud against edited views.
    Refine {
        #[arg(long, value_enum, default_value_t = RefineStage::Both)]
        stage: RefineStage,
        #[arg(long)]
        input: PathBuf,
        /// Edited views the refinement matches.
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training log (JSON).
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score an edit with the Dragging Accuracy Index.
    Evaluate {
        #[arg(long)]
        orig: PathBuf,
        #[arg(long)]
        edited: PathBuf,
        #[arg(long)]
        proj: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline, resuming from any intact earlier outputs.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long)]
        asset: Option<PathBuf>,
        #[arg(long, env = ARTIFACT_ROOT_ENV, default_value = "artifacts")]
        artifact_root: PathBuf,
        /// Defaults for submitted runs.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RefineStage {
    Deform,
    Sds,
    Both,
}

fn partial_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut config = path.map(RunConfig::load).transpose()?.unwrap_or_default();
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Render { asset, out, resolution } => {
            let rig = RunConfig::default().rig.with_resolution(resolution);
            render_rig(&load_asset(&asset)?, &rig)?.save(&out)?;
        }
        Command::Project { asset, views, drags, out } => {
            let views = MultiViewImageSet::load(&views)?;
            let rig = RunConfig::default().rig.with_resolution(views.resolution());
            let radius = load_asset(&asset)?.radius();
            let projected = stages::project(&load_dragset(&drags)?, &views, &rig, radius)?;
            let hidden = projected.fully_occluded();
            if !hidden.is_empty() {
                log::warn!("pairs {hidden:?} are hidden in every view");
            }
            save_dragset(&projected, &out)?;
        }
        Command::Drag { views, proj, out, config, seed } => {
            let config = partial_config(config.as_deref(), seed)?;
            let views = MultiViewImageSet::load(&views)?;
            let backend = stages::denoiser(&config.backends.denoiser, &views, config.mixture_sigma)?;
            let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(config.seed, Stage::Drag));
            let result = drag_edit(&views, &load_dragset(&proj)?, backend.as_ref(), &config.guidance, &mut rng)?;
            result.edited.save(&out)?;
            write_json(&out.join(stages::GUIDANCE_LOG), &result.log)?;
        }
        Command::Reconstruct { views, out, backend, resolution } => {
            let views = MultiViewImageSet::load(&views)?;
            let rig = RunConfig::default().rig.with_resolution(resolution);
            let fused = stages::reconstruct(&views, &rig, stages::reconstructor(&backend)?.as_ref())?;
            save_gaussians(&fused, &out)?;
        }
        Command::Refine { stage, input, targets, out, log, config, seed } => {
            let config = partial_config(config.as_deref(), seed)?;
            let edited = MultiViewImageSet::load(&targets)?;
            let targets = edited.downsample(edited.resolution() / config.refine_resolution)?;
            let rig = config.refine_rig();
            let loss = stages::perceptual(&config.backends.perceptual)?;
            let mut cloud = load_gaussians(&input)?;
            let mut record = json!({});
            if stage != RefineStage::Sds {
                let mut deform = config.deform.clone();
                deform.seed = stage_seed(config.seed, Stage::Deform);
                let result = optimize_positions(&cloud, &targets, &rig, loss.as_ref(), &deform)?;
                record["deform"] = json!({ "losses": result.losses });
                cloud = result.cloud;
            }
            if stage != RefineStage::Deform {
                let prior = stages::prior(&config.backends.prior, &cloud, rig)?;
                let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(config.seed, Stage::Sds));
                let result = refine_sds(&cloud, prior.as_ref(), &targets, &rig, loss.as_ref(), &config.sds, &mut rng)?;
                record["sds"] = serde_json::to_value(&result.log)?;
                cloud = result.cloud;
            }
            save_gaussians(&cloud, &out)?;
            write_json(&log, &record)?;
        }
        Command::Evaluate { orig, edited, proj, out } => {
            let report = stages::evaluate(&MultiViewImageSet::load(&orig)?, &MultiViewImageSet::load(&edited)?, &load_dragset(&proj)?)?;
            for (g, s) in &report.gammas {
                println!("gamma {g:>2}: {:.6}", s.dai);
            }
            write_json(&out, &report)?;
        }
        Command::Run { config, output, seed } => {
            let mut config = RunConfig::load(&config)?;
            if let Some(o) = output {
                config.output = o;
            }
            if let Some(s) = seed {
                config.seed = s;
            }
            let manifest = run_pipeline(&config)?;
            for rec in &manifest.stages {
                let secs = rec.seconds.map_or(String::new(), |s| format!(" {s:.1}s"));
                let reused = if rec.reused { " (reused)" } else { "" };
                println!("{:<12}{:?}{secs}{reused}", rec.stage.as_str(), rec.status);
                if let Some(e) = &rec.error {
                    println!("  {e}");
                }
            }
            return Ok(manifest.is_complete());
        }
        Command::Serve { addr, asset, artifact_root, config } => {
            let base = config.as_deref().map(RunConfig::load).transpose()?.unwrap_or_default();
            let runtime = tokio::runtime::Runtime::new().map_err(|e| splatdrag::PipelineError::Config(e.to_string()))?;
            let served = runtime.block_on(service::serve(addr, ServiceConfig { artifact_root, asset, base }));
            served.map_err(|e| splatdrag::PipelineError::Config(format!("server: {e}")))?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
