#![allow(dead_code)]

use std::path::Path;

use nalgebra::Vector3;
use splatdrag::RunConfig;
use splatdrag_core::drag::save_dragset;
use splatdrag_core::ply::save_gaussians;
use splatdrag_core::{DragPair, DragSet, GaussianCloud};

/// Twenty colored Gaussians on a Fibonacci sphere of radius 1.
pub fn sphere_cloud() -> GaussianCloud {
    let n = 20;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut c = GaussianCloud::empty(0);
    for i in 0..n {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - y * y).sqrt();
        let th = golden * i as f64;
        let p = Vector3::new(r * th.cos(), y, r * th.sin());
        c.push_isotropic(p, 0.12, 0.9, [0.5 + 0.4 * p.x, 0.5 + 0.4 * p.y, 0.5 + 0.4 * p.z]);
    }
    c
}

/// One pair on the side facing the first camera, dragged upward.
pub fn one_pair() -> DragSet {
    DragSet::new(vec![DragPair::new(Vector3::new(1.0, 0.0, 0.0), Vector3::new(1.0, 0.15, 0.0))]).unwrap()
}

/// A small, fast configuration over the toy backends, with inputs
/// written into `dir`.
pub fn toy_config(dir: &Path) -> RunConfig {
    let asset = dir.join("asset.ply");
    let drags = dir.join("drags.json");
    save_gaussians(&sphere_cloud(), &asset).unwrap();
    save_dragset(&one_pair(), &drags).unwrap();
    let mut c = RunConfig {
        asset,
        drags,
        output: dir.join("out"),
        seed: 7,
        refine_resolution: 16,
        ..Default::default()
    };
    c.rig.resolution = 32;
    c.guidance.ddim_steps = 8;
    c.deform.iterations = 15;
    c.sds.iterations = 12;
    c.sds.densify.interval = 5;
    c
}
