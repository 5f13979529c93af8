//! Forward-only z-buffered triangle rasterization with perspective-correct
//! vertex-color interpolation. Depth is the nearest-hit camera z.

use nalgebra::Vector3;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::render::RenderOutput;

const NEAR: f64 = 1e-3;

pub fn rasterize_mesh(mesh: &TriMesh, camera: &Camera, background: f64) -> Result<RenderOutput> {
    camera.validate()?;
    if !(0.0..=1.0).contains(&background) {
        return Err(Error::Validation(format!("background {background} outside [0,1]")));
    }
    let res = camera.resolution;
    let mut out = RenderOutput::blank(res, background);
    let (f, c) = (camera.focal(), camera.principal_point());
    let cam_pts: Vec<Vector3<f64>> = mesh.vertices.iter().map(|v| camera.to_camera(v)).collect();

    for face in &mesh.faces {
        let t = face.map(|i| cam_pts[i]);
        // Triangles crossing the near plane are dropped rather than clipped;
        // assets sit well inside the orbit radius.
        if t.iter().any(|p| p.z <= NEAR) {
            continue;
        }
        let s = t.map(|p| [c + f * p.x / p.z, c - f * p.y / p.z]);
        let area = edge(s[0], s[1], s[2]);
        if area == 0.0 {
            continue;
        }
        let colors = face.map(|i| mesh.vertex_color(i));
        let x0 = s.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min).ceil().max(0.0) as usize;
        let x1 = s.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max).floor().min(res as f64 - 1.0);
        let y0 = s.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min).ceil().max(0.0) as usize;
        let y1 = s.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max).floor().min(res as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let p = [x as f64, y as f64];
                let w = [edge(s[1], s[2], p) / area, edge(s[2], s[0], p) / area, edge(s[0], s[1], p) / area];
                if w.iter().any(|&b| b < 0.0) {
                    continue;
                }
                // Perspective-correct: 1/z is affine in screen space.
                let inv_z = w[0] / t[0].z + w[1] / t[1].z + w[2] / t[2].z;
                let z = 1.0 / inv_z;
                if z >= out.depth[[y, x]] {
                    continue;
                }
                out.depth[[y, x]] = z;
                out.alpha[[y, x]] = 1.0;
                for ch in 0..3 {
                    let v = (0..3).map(|k| w[k] / t[k].z * colors[k][ch]).sum::<f64>() * z;
                    out.rgb[[y, x, ch]] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(out)
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}
