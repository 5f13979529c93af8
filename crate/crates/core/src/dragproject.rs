//! Projection of 3D drag handles into the rig views with depth-based
//! occlusion culling.
//!
//! A pair is visible in a view when both endpoints land inside the image and
//! neither lies behind the rendered surface by more than a small tolerance:
//! `p_z <= depth(p) + eps` and `q_z <= depth(q) + eps`. Surface depth is
//! bilinearly interpolated at the sub-pixel projection, so grazing surfaces
//! are not penalized by half a pixel of rounding.

use nalgebra::Vector3;

use crate::camera::{Camera, RigConfig};
use crate::drag::{DragSet, ProjectedPair};
use crate::error::{Error, Result};
use crate::views::MultiViewImageSet;

/// Depth slack as a fraction of the scene radius.
pub const DEPTH_TOLERANCE_FRACTION: f64 = 0.01;

/// Depth slack for a scene of the given radius.
pub fn depth_tolerance(scene_radius: f64) -> f64 {
    DEPTH_TOLERANCE_FRACTION * scene_radius
}

/// Projects every pair into every view of `views` (rendered with `rig`).
/// Pixel coordinates are `[column, row]`, rounded to the nearest pixel.
/// Pairs hidden in all four views are kept but logged; they contribute
/// nothing downstream since every consumer reads only visible pairs.
pub fn project_pairs(drags: &DragSet, views: &MultiViewImageSet, rig: &RigConfig, tolerance: f64) -> Result<DragSet> {
    drags.validate()?;
    views.validate()?;
    rig.validate()?;
    if views.resolution() != rig.resolution {
        return Err(Error::Validation(format!(
            "views are {}px but the rig renders {}px",
            views.resolution(),
            rig.resolution
        )));
    }
    if !(tolerance >= 0.0) {
        return Err(Error::Validation(format!("depth tolerance {tolerance} must be non-negative")));
    }
    let cameras = rig.cameras()?;
    let mut out = drags.clone();
    out.projections = cameras
        .iter()
        .zip(&views.views)
        .enumerate()
        .map(|(i, (cam, view))| {
            drags
                .pairs
                .iter()
                .enumerate()
                .map(|(j, pair)| {
                    let (p, p_z, p_ok) = test_point(cam, &view.depth, &pair.source(), tolerance);
                    let (q, q_z, q_ok) = test_point(cam, &view.depth, &pair.target(), tolerance);
                    ProjectedPair {
                        view: i,
                        pair: j,
                        p,
                        q,
                        p_z,
                        q_z,
                        visible: p_ok && q_ok,
                    }
                })
                .collect()
        })
        .collect();
    for j in out.fully_occluded() {
        log::warn!("drag pair {j} is occluded in all four views and will be ignored");
    }
    Ok(out)
}

/// Rounded pixel, camera depth and pass/fail of the visibility test.
fn test_point(cam: &Camera, depth: &ndarray::Array2<f64>, point: &Vector3<f64>, tolerance: f64) -> ([i64; 2], f64, bool) {
    let Some((u, v, z)) = cam.project(point) else {
        return ([-1, -1], f64::INFINITY, false);
    };
    let px = [u.round() as i64, v.round() as i64];
    let res = cam.resolution as i64;
    let inside = (0..res).contains(&px[0]) && (0..res).contains(&px[1]);
    let ok = inside && z <= surface_depth(depth, u, v) + tolerance;
    (px, z, ok)
}

/// Bilinear depth at a continuous pixel position, using only neighbors that
/// hit the surface (weights renormalized). Infinite when none does.
pub fn surface_depth(depth: &ndarray::Array2<f64>, u: f64, v: f64) -> f64 {
    let (h, w) = depth.dim();
    let (x0, y0) = (u.floor(), v.floor());
    let (fx, fy) = (u - x0, v - y0);
    let (mut acc, mut wsum) = (0.0, 0.0);
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let (x, y) = (x0 as i64 + dx, y0 as i64 + dy);
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                continue;
            }
            let d = depth[[y as usize, x as usize]];
            let wgt = wx * wy;
            if d.is_finite() && wgt > 0.0 {
                acc += wgt * d;
                wsum += wgt;
            }
        }
    }
    if wsum > 0.0 {
        acc / wsum
    } else {
        f64::INFINITY
    }
}
