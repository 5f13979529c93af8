//! The editable Gaussian splat asset.
//!
//! Parameters are stored in their optimization space: log-scales, opacity
//! logits and raw (possibly unnormalized) quaternions. The `*_activated`
//! accessors return the values the renderer actually uses.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::sh;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<Vector3<f64>>,
    /// `(w, x, y, z)` quaternions; normalized on activation.
    pub rotations: Vec<Quaternion<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub opacity_logits: Vec<f64>,
    /// Spherical-harmonic coefficients, `sh_basis_count(sh_degree)` RGB
    /// triples per Gaussian, laid out Gaussian-major.
    pub sh_coeffs: Vec<[f64; 3]>,
    pub sh_degree: usize,
    /// Source view (0..4) of each Gaussian, when known.
    pub view_ids: Option<Vec<u8>>,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl GaussianCloud {
    pub fn empty(sh_degree: usize) -> Self {
        Self {
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            sh_coeffs: Vec::new(),
            sh_degree,
            view_ids: None,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn basis_count(&self) -> usize {
        sh::basis_count(self.sh_degree)
    }

    /// Appends an isotropic, degree-0 colored Gaussian. Higher SH bands are
    /// zero-filled when the cloud has a higher degree.
    pub fn push_isotropic(&mut self, position: Vector3<f64>, scale: f64, opacity: f64, rgb: [f64; 3]) {
        self.push(
            position,
            Quaternion::identity(),
            Vector3::repeat(scale.ln()),
            logit(opacity),
            &[sh::rgb_to_dc(rgb)],
        );
    }

    /// Appends a Gaussian given raw parameters. `coeffs` may be shorter than
    /// the cloud's basis count; missing bands are zero.
    pub fn push(
        &mut self,
        position: Vector3<f64>,
        rotation: Quaternion<f64>,
        log_scale: Vector3<f64>,
        opacity_logit: f64,
        coeffs: &[[f64; 3]],
    ) {
        let nb = self.basis_count();
        self.positions.push(position);
        self.rotations.push(rotation);
        self.log_scales.push(log_scale);
        self.opacity_logits.push(opacity_logit);
        for k in 0..nb {
            self.sh_coeffs.push(coeffs.get(k).copied().unwrap_or([0.0; 3]));
        }
        if let Some(ids) = self.view_ids.as_mut() {
            ids.push(0);
        }
    }

    pub fn coeffs(&self, i: usize) -> &[[f64; 3]] {
        let nb = self.basis_count();
        &self.sh_coeffs[i * nb..(i + 1) * nb]
    }

    pub fn coeffs_mut(&mut self, i: usize) -> &mut [[f64; 3]] {
        let nb = self.basis_count();
        &mut self.sh_coeffs[i * nb..(i + 1) * nb]
    }

    pub fn rotation_activated(&self, i: usize) -> UnitQuaternion<f64> {
        UnitQuaternion::from_quaternion(self.rotations[i])
    }

    pub fn scale_activated(&self, i: usize) -> Vector3<f64> {
        self.log_scales[i].map(f64::exp)
    }

    pub fn opacity_activated(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    /// Base (view-independent) color of Gaussian `i`.
    pub fn dc_color(&self, i: usize) -> [f64; 3] {
        sh::dc_to_rgb(self.coeffs(i)[0])
    }

    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            let n = q.norm();
            if n > 0.0 {
                *q /= n;
            } else {
                *q = Quaternion::identity();
            }
        }
    }

    /// Checks every field is finite and the layout is consistent.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.rotations.len() != n
            || self.log_scales.len() != n
            || self.opacity_logits.len() != n
            || self.sh_coeffs.len() != n * self.basis_count()
        {
            return Err(Error::Validation("gaussian cloud field lengths disagree".into()));
        }
        if let Some(ids) = &self.view_ids {
            if ids.len() != n {
                return Err(Error::Validation("view_id length disagrees with cloud size".into()));
            }
            if let Some(bad) = ids.iter().find(|&&v| v > 3) {
                return Err(Error::Validation(format!("view_id {bad} outside 0..=3")));
            }
        }
        for i in 0..n {
            let finite = self.positions[i].iter().all(|v| v.is_finite())
                && self.rotations[i].coords.iter().all(|v| v.is_finite())
                && self.log_scales[i].iter().all(|v| v.is_finite())
                && self.opacity_logits[i].is_finite()
                && self.coeffs(i).iter().flatten().all(|v| v.is_finite());
            if !finite {
                return Err(Error::Validation(format!("gaussian {i} has non-finite parameters")));
            }
            if self.rotations[i].norm() == 0.0 {
                return Err(Error::Validation(format!("gaussian {i} has a zero quaternion")));
            }
        }
        Ok(())
    }

    /// Translates the centroid to the origin and scales so the farthest
    /// center sits on the unit sphere. Log-scales shift accordingly.
    pub fn normalize_to_unit_sphere(&mut self) {
        let Some((centroid, factor)) = unit_sphere_transform(&self.positions) else {
            return;
        };
        let log_factor = factor.ln();
        for p in &mut self.positions {
            *p = (*p - centroid) * factor;
        }
        for s in &mut self.log_scales {
            s.add_scalar_mut(log_factor);
        }
    }

    /// Largest center distance from the origin.
    pub fn radius(&self) -> f64 {
        self.positions.iter().map(|p| p.norm()).fold(0.0, f64::max)
    }

    /// Concatenates `other` onto `self`. View tags are kept when both sides
    /// carry them; SH degree must match.
    pub fn extend(&mut self, other: &GaussianCloud) -> Result<()> {
        if self.sh_degree != other.sh_degree {
            return Err(Error::Validation(format!(
                "cannot merge SH degree {} into degree {}",
                other.sh_degree, self.sh_degree
            )));
        }
        let had = self.len();
        self.positions.extend_from_slice(&other.positions);
        self.rotations.extend_from_slice(&other.rotations);
        self.log_scales.extend_from_slice(&other.log_scales);
        self.opacity_logits.extend_from_slice(&other.opacity_logits);
        self.sh_coeffs.extend_from_slice(&other.sh_coeffs);
        self.view_ids = match (self.view_ids.take(), &other.view_ids) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            (None, Some(b)) if had == 0 => Some(b.clone()),
            _ => None,
        };
        Ok(())
    }

    /// Keeps only the Gaussians for which `keep` is true.
    pub fn retain(&mut self, keep: &[bool]) {
        let nb = self.basis_count();
        let mut out = GaussianCloud::empty(self.sh_degree);
        out.view_ids = self.view_ids.as_ref().map(|_| Vec::new());
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                continue;
            }
            out.positions.push(self.positions[i]);
            out.rotations.push(self.rotations[i]);
            out.log_scales.push(self.log_scales[i]);
            out.opacity_logits.push(self.opacity_logits[i]);
            out.sh_coeffs.extend_from_slice(&self.sh_coeffs[i * nb..(i + 1) * nb]);
            if let (Some(dst), Some(src)) = (out.view_ids.as_mut(), self.view_ids.as_ref()) {
                dst.push(src[i]);
            }
        }
        *self = out;
    }

    /// Copies Gaussian `i` to the end of the cloud, returning the new index.
    pub fn duplicate(&mut self, i: usize) -> usize {
        let nb = self.basis_count();
        self.positions.push(self.positions[i]);
        self.rotations.push(self.rotations[i]);
        self.log_scales.push(self.log_scales[i]);
        self.opacity_logits.push(self.opacity_logits[i]);
        for k in 0..nb {
            let c = self.sh_coeffs[i * nb + k];
            self.sh_coeffs.push(c);
        }
        if let Some(ids) = self.view_ids.as_mut() {
            let v = ids[i];
            ids.push(v);
        }
        self.len() - 1
    }
}

/// Centroid and scale factor mapping `points` into the unit ball. `None`
/// for an empty set.
pub(crate) fn unit_sphere_transform(points: &[Vector3<f64>]) -> Option<(Vector3<f64>, f64)> {
    if points.is_empty() {
        return None;
    }
    let centroid = points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / points.len() as f64;
    let r = points.iter().map(|p| (p - centroid).norm()).fold(0.0, f64::max);
    let factor = if r > 0.0 { 1.0 / r } else { 1.0 };
    Some((centroid, factor))
}
