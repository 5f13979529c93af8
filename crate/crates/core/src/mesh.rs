use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::cloud::unit_sphere_transform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>, colors: Option<Vec<[f64; 3]>>) -> Result<Self> {
        let n = vertices.len();
        if let Some(c) = &colors {
            if c.len() != n {
                return Err(Error::Validation(format!("{} colors for {n} vertices", c.len())));
            }
        }
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return Err(Error::Validation(format!("face {f:?} indexes past {n} vertices")));
        }
        if vertices.iter().flat_map(|v| v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Data("non-finite vertex coordinate".into()));
        }
        let mut mesh = Self { vertices, faces, colors };
        mesh.drop_degenerate_faces();
        Ok(mesh)
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    fn drop_degenerate_faces(&mut self) {
        let v = &self.vertices;
        self.faces.retain(|&[a, b, c]| (v[b] - v[a]).cross(&(v[c] - v[a])).norm() > 0.0);
    }

    pub fn vertex_color(&self, i: usize) -> [f64; 3] {
        self.colors.as_ref().map_or([0.8; 3], |c| c[i])
    }

    pub fn normalize_to_unit_sphere(&mut self) {
        if let Some((centroid, factor)) = unit_sphere_transform(&self.vertices) {
            for v in &mut self.vertices {
                *v = (*v - centroid) * factor;
            }
        }
    }

    pub fn translate(&mut self, offset: Vector3<f64>) {
        for v in &mut self.vertices {
            *v += offset;
        }
    }

    /// Axis-aligned cube of edge `size` centered at the origin.
    pub fn cube(size: f64) -> Self {
        let h = size / 2.0;
        let vertices = (0..8)
            .map(|i| {
                Vector3::new(
                    if i & 1 == 0 { -h } else { h },
                    if i & 2 == 0 { -h } else { h },
                    if i & 4 == 0 { -h } else { h },
                )
            })
            .collect();
        let faces = vec![
            [0, 2, 1], [1, 2, 3], // z-
            [4, 5, 6], [5, 7, 6], // z+
            [0, 1, 4], [1, 5, 4], // y-
            [2, 6, 3], [3, 6, 7], // y+
            [0, 4, 2], [2, 4, 6], // x-
            [1, 3, 5], [3, 7, 5], // x+
        ];
        Self { vertices, faces, colors: None }
    }

    /// Latitude/longitude sphere with `rings` latitude bands.
    pub fn uv_sphere(radius: f64, rings: usize, segments: usize) -> Self {
        let mut vertices = vec![Vector3::new(0.0, radius, 0.0)];
        for r in 1..rings {
            let theta = std::f64::consts::PI * r as f64 / rings as f64;
            for s in 0..segments {
                let phi = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
                vertices.push(radius * Vector3::new(theta.sin() * phi.cos(), theta.cos(), theta.sin() * phi.sin()));
            }
        }
        vertices.push(Vector3::new(0.0, -radius, 0.0));
        let south = vertices.len() - 1;
        let ring = |r: usize, s: usize| 1 + (r - 1) * segments + s % segments;
        let mut faces = Vec::new();
        for s in 0..segments {
            faces.push([0, ring(1, s + 1), ring(1, s)]);
            faces.push([south, ring(rings - 1, s), ring(rings - 1, s + 1)]);
        }
        for r in 1..rings - 1 {
            for s in 0..segments {
                let (a, b, c, d) = (ring(r, s), ring(r, s + 1), ring(r + 1, s), ring(r + 1, s + 1));
                faces.push([a, b, c]);
                faces.push([b, d, c]);
            }
        }
        Self { vertices, faces, colors: None }
    }
}

/// Reads a Wavefront OBJ: `v` lines (optionally with trailing RGB) and `f`
/// lines, with polygons fan-triangulated. Other statements are ignored.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriMesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text)
}

pub fn parse_obj(text: &str) -> Result<TriMesh> {
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        let mut toks = line.split_whitespace();
        let bad = |what: &str| Error::Format(format!("line {}: {what}", lineno + 1));
        match toks.next() {
            Some("v") => {
                let vals = toks
                    .map(|t| t.parse::<f64>().map_err(|_| bad("malformed vertex")))
                    .collect::<Result<Vec<_>>>()?;
                if vals.len() < 3 {
                    return Err(bad("vertex needs three coordinates"));
                }
                vertices.push(Vector3::new(vals[0], vals[1], vals[2]));
                if vals.len() >= 6 {
                    colors.push([vals[3], vals[4], vals[5]]);
                }
            }
            Some("f") => {
                let idx = toks
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        let i: i64 = head.parse().map_err(|_| bad("malformed face index"))?;
                        let n = vertices.len() as i64;
                        let resolved = if i < 0 { n + i } else { i - 1 };
                        if resolved < 0 || resolved >= n {
                            return Err(Error::Validation(format!(
                                "line {}: face index {i} out of range for {n} vertices",
                                lineno + 1
                            )));
                        }
                        Ok(resolved as usize)
                    })
                    .collect::<Result<Vec<_>>>()?;
                if idx.len() < 3 {
                    return Err(bad("face needs at least three vertices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    let colors = (!colors.is_empty() && colors.len() == vertices.len()).then_some(colors);
    TriMesh::new(vertices, faces, colors)
}
