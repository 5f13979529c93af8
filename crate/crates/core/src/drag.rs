//! 3D drag handles and their per-view projections.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DragPair {
    pub source: [f64; 3],
    pub target: [f64; 3],
}

impl DragPair {
    pub fn new(source: Vector3<f64>, target: Vector3<f64>) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
        }
    }

    pub fn source(&self) -> Vector3<f64> {
        Vector3::from(self.source)
    }

    pub fn target(&self) -> Vector3<f64> {
        Vector3::from(self.target)
    }
}

/// A drag pair seen from one view. Pixel coordinates are rounded to the
/// nearest pixel; depths are camera-space z (`+inf` when behind the camera).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPair {
    pub view: usize,
    pub pair: usize,
    pub p: [i64; 2],
    pub q: [i64; 2],
    pub p_z: f64,
    pub q_z: f64,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DragSet {
    pub pairs: Vec<DragPair>,
    /// `projections[view][pair]`, empty until projected.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub projections: Vec<Vec<ProjectedPair>>,
}

impl DragSet {
    pub fn new(pairs: Vec<DragPair>) -> Result<Self> {
        let set = Self {
            pairs,
            projections: Vec::new(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn k(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_projected(&self) -> bool {
        self.projections.len() == 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Validation("a drag set needs at least one pair".into()));
        }
        for (j, p) in self.pairs.iter().enumerate() {
            if p.source.iter().chain(&p.target).any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("pair {j} has non-finite coordinates")));
            }
        }
        if !self.projections.is_empty() {
            if self.projections.len() != 4 || self.projections.iter().any(|v| v.len() != self.k()) {
                return Err(Error::Validation("projections must cover 4 views x k pairs".into()));
            }
        }
        Ok(())
    }

    /// Visible projections of view `i`.
    pub fn visible_in(&self, view: usize) -> impl Iterator<Item = &ProjectedPair> {
        self.projections.get(view).into_iter().flatten().filter(|p| p.visible)
    }

    /// Pairs hidden in every view.
    pub fn fully_occluded(&self) -> Vec<usize> {
        if !self.is_projected() {
            return Vec::new();
        }
        (0..self.k())
            .filter(|&j| self.projections.iter().all(|v| !v[j].visible))
            .collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: DragSet = serde_json::from_str(text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn load_dragset(path: impl AsRef<Path>) -> Result<DragSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DragSet::from_json(&text)
}

pub fn save_dragset(set: &DragSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, set.to_json()?).map_err(|e| Error::io(path, e))
}
