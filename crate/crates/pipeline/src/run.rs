//! The staged runner: render → project → drag → reconstruct → deform →
//! sds → evaluate, with reuse of intact outputs from earlier runs.

use std::fs;
use std::time::Instant;

use serde_json::json;

use crate::config::RunConfig;
use crate::error::{PipelineError, Result};
use crate::lock::OutputLock;
use crate::manifest::{describe, hash_file, outputs_intact, sha256_hex, Artifact, RunManifest, Stage, StageStatus};
use crate::stages;

/// Runs every stage, reusing completed stages whose fingerprints and
/// outputs match the manifest already in the output directory.
///
/// Configuration problems (including missing input files) and a busy
/// output directory are errors before any stage starts. A failing stage is
/// recorded in the returned manifest and every later stage is skipped.
pub fn run_pipeline(config: &RunConfig) -> Result<RunManifest> {
    run_pipeline_with(config, &mut |_| {})
}

/// As [`run_pipeline`], calling `observer` after every status change.
pub fn run_pipeline_with(config: &RunConfig, observer: &mut dyn FnMut(&RunManifest)) -> Result<RunManifest> {
    config.validate()?;
    let dir = config.output.as_path();
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let _lock = OutputLock::acquire(dir)?;
    let previous = RunManifest::load(dir).unwrap_or_else(|e| {
        log::warn!("ignoring unreadable manifest: {e}");
        None
    });
    let mut manifest = RunManifest::new(config)?;
    if let Some(prev) = &previous {
        manifest.events = prev.events.clone();
    }
    let mut upstream = sha256_hex(format!("{}:{}", hash_file(&config.asset)?.0, hash_file(&config.drags)?.0).as_bytes());
    let mut failed = false;

    let mut update = |m: &RunManifest| -> Result<()> {
        m.save(dir)?;
        observer(m);
        Ok(())
    };

    for stage in Stage::ALL {
        if failed {
            manifest.set_status(stage, StageStatus::Skipped);
            update(&manifest)?;
            continue;
        }
        let fingerprint = fingerprint(stage, config, &upstream)?;
        let reusable = previous
            .as_ref()
            .map(|p| p.record(stage))
            .filter(|r| r.status == StageStatus::Complete && r.fingerprint.as_ref() == Some(&fingerprint) && outputs_intact(dir, &r.outputs));
        if let Some(prev) = reusable {
            log::info!("{stage}: reusing outputs");
            let rec = manifest.record_mut(stage);
            rec.outputs = prev.outputs.clone();
            rec.seconds = prev.seconds;
            rec.fingerprint = Some(fingerprint.clone());
            rec.reused = true;
            manifest.set_status(stage, StageStatus::Complete);
            upstream = chain(&fingerprint, &manifest.record(stage).outputs);
            update(&manifest)?;
            continue;
        }

        manifest.set_status(stage, StageStatus::Running);
        update(&manifest)?;
        log::info!("{stage}: running");
        let start = Instant::now();
        let result = stages::execute(stage, dir, config).and_then(|names| describe(dir, &names));
        let rec = manifest.record_mut(stage);
        rec.seconds = Some(start.elapsed().as_secs_f64());
        rec.fingerprint = Some(fingerprint.clone());
        match result {
            Ok(outputs) => {
                upstream = chain(&fingerprint, &outputs);
                rec.outputs = outputs;
                manifest.set_status(stage, StageStatus::Complete);
            }
            Err(e) => {
                log::error!("{stage} failed: {e}");
                rec.error = Some(e.to_string());
                manifest.set_status(stage, StageStatus::Failed);
                failed = true;
            }
        }
        update(&manifest)?;
    }
    Ok(manifest)
}

/// Hash of the configuration a stage reads plus everything upstream.
fn fingerprint(stage: Stage, c: &RunConfig, upstream: &str) -> Result<String> {
    let b = &c.backends;
    let section = match stage {
        Stage::Render | Stage::Project | Stage::Evaluate => json!({ "rig": c.rig }),
        Stage::Drag => json!({ "guidance": c.guidance, "denoiser": b.denoiser, "sigma": c.mixture_sigma, "seed": c.seed }),
        Stage::Reconstruct => json!({ "reconstructor": b.reconstructor, "resolution": c.refine_resolution }),
        Stage::Deform => json!({ "deform": c.deform, "perceptual": b.perceptual, "resolution": c.refine_resolution, "seed": c.seed }),
        Stage::Sds => json!({ "sds": c.sds, "prior": b.prior, "perceptual": b.perceptual, "resolution": c.refine_resolution, "seed": c.seed }),
    };
    let doc = json!({ "stage": stage, "config": section, "upstream": upstream });
    Ok(sha256_hex(&serde_json::to_vec(&doc)?))
}

fn chain(fingerprint: &str, outputs: &[Artifact]) -> String {
    let mut text = fingerprint.to_string();
    for a in outputs {
        text.push_str(&format!("|{}={}", a.name, a.sha256));
    }
    sha256_hex(text.as_bytes())
}
