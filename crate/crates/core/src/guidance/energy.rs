//! Multi-view guidance energies over denoiser features.
//!
//! For view `i` and layer `ℓ` the term is `1 / (0.5 cos(a, b) + 0.5)`, with
//! `a` the edited-branch features and `b` the original-branch features, both
//! flattened over the masked cells. The edit energy pairs target cells with
//! source cells; the content energy compares the unedited region with
//! itself. Layer terms are averaged, view terms summed, and a view whose
//! masks are empty contributes 0. The original branch is a constant
//! (stop-gradient): gradients flow only into the edited features.

use ndarray::{Array4, Zip};

use crate::error::{Error, Result};
use crate::guidance::backend::{Condition, DenoiserBackend, Features};
use crate::guidance::masks::EnergyMasks;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnergyKind {
    Edit,
    Content,
}

/// Energy value and `∂E/∂F_edi`.
pub fn masked_energy(
    f_edi: &Features,
    f_ori: &Features,
    masks: &EnergyMasks,
    kind: EnergyKind,
) -> Result<(f64, Features)> {
    if f_edi.layers.len() != masks.layers.len() || f_ori.layers.len() != masks.layers.len() {
        return Err(Error::Validation(format!(
            "{} feature layers but {} mask layers",
            f_edi.layers.len(),
            masks.layers.len()
        )));
    }
    let mut grad = f_edi.zeros_like();
    let mut total = 0.0;
    for view in 0..4 {
        let mut terms = Vec::new();
        for (l, layer) in masks.layers.iter().enumerate() {
            let (a_map, b_map) = (&f_edi.layers[l], &f_ori.layers[l]);
            let vm = &layer.views[view];
            if a_map.dim() != b_map.dim() || a_map.dim().1 != vm.edit.dim().0 || a_map.dim().2 != vm.edit.dim().1 {
                return Err(Error::Validation(format!(
                    "layer {l}: features {:?} do not match masks {:?}",
                    a_map.dim(),
                    vm.edit.dim()
                )));
            }
            // (edited cell, original cell) pairs.
            let cells: Vec<((usize, usize), (usize, usize))> = match kind {
                EnergyKind::Edit => vm.pairs.iter().map(|&(src, dst)| (dst, src)).collect(),
                EnergyKind::Content => vm.unedited_cells().into_iter().map(|c| (c, c)).collect(),
            };
            if cells.is_empty() {
                continue;
            }
            let channels = a_map.dim().3;
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for &((ar, ac), (br, bc)) in &cells {
                for ch in 0..channels {
                    let a = a_map[[view, ar, ac, ch]];
                    let b = b_map[[view, br, bc, ch]];
                    dot += a * b;
                    na += a * a;
                    nb += b * b;
                }
            }
            let denom = (na * nb).sqrt();
            let cos = if denom > 0.0 { dot / denom } else { 0.0 };
            let d = 0.5 * cos + 0.5;
            terms.push((l, cells, 1.0 / d, na, denom, cos, d));
        }
        if terms.is_empty() {
            continue;
        }
        let weight = 1.0 / terms.len() as f64;
        for (l, cells, term, na, denom, cos, d) in terms {
            total += weight * term;
            if denom == 0.0 {
                continue;
            }
            // dT/dcos = -0.5 / d², dcos/da = b / |a||b| - cos · a / |a|².
            let dt = weight * -0.5 / (d * d);
            let (a_map, b_map) = (&f_edi.layers[l], &f_ori.layers[l]);
            let g = &mut grad.layers[l];
            for &((ar, ac), (br, bc)) in &cells {
                for ch in 0..a_map.dim().3 {
                    let a = a_map[[view, ar, ac, ch]];
                    let b = b_map[[view, br, bc, ch]];
                    g[[view, ar, ac, ch]] += dt * (b / denom - cos * a / na);
                }
            }
        }
    }
    Ok((total, grad))
}

pub fn energy_edit(f_edi: &Features, f_ori: &Features, masks: &EnergyMasks) -> Result<f64> {
    Ok(masked_energy(f_edi, f_ori, masks, EnergyKind::Edit)?.0)
}

pub fn energy_content(f_edi: &Features, f_ori: &Features, masks: &EnergyMasks) -> Result<f64> {
    Ok(masked_energy(f_edi, f_ori, masks, EnergyKind::Content)?.0)
}

/// Everything an energy may look at during one sampling step.
pub struct EnergyContext<'a> {
    pub backend: &'a dyn DenoiserBackend,
    pub z_edi: &'a Array4<f64>,
    pub z_ori: &'a Array4<f64>,
    pub t: usize,
    pub cond: &'a Condition,
}

#[derive(Debug, Clone)]
pub struct EnergyEval {
    pub value: f64,
    /// Named components for the run log.
    pub components: Vec<(&'static str, f64)>,
    /// `∂E/∂z_edi`.
    pub grad: Array4<f64>,
}

pub trait GuidanceEnergy: Send + Sync {
    fn evaluate(&self, ctx: &EnergyContext) -> Result<EnergyEval>;
}

/// `α E_edit + β E_content` on backend features.
#[derive(Debug, Clone)]
pub struct DragEnergy {
    pub masks: EnergyMasks,
    pub alpha: f64,
    pub beta: f64,
}

impl GuidanceEnergy for DragEnergy {
    fn evaluate(&self, ctx: &EnergyContext) -> Result<EnergyEval> {
        let f_edi = ctx.backend.features(ctx.z_edi, ctx.t, ctx.cond)?;
        let f_ori = ctx.backend.features(ctx.z_ori, ctx.t, ctx.cond)?;
        let (edit, g_edit) = masked_energy(&f_edi, &f_ori, &self.masks, EnergyKind::Edit)?;
        let (content, g_content) = masked_energy(&f_edi, &f_ori, &self.masks, EnergyKind::Content)?;
        let mut g = g_edit;
        for (a, b) in g.layers.iter_mut().zip(&g_content.layers) {
            Zip::from(a).and(b).for_each(|x, &y| *x = self.alpha * *x + self.beta * y);
        }
        let grad = ctx.backend.features_vjp(ctx.z_edi, ctx.t, ctx.cond, &g)?;
        Ok(EnergyEval {
            value: self.alpha * edit + self.beta * content,
            components: vec![("edit", edit), ("content", content)],
            grad,
        })
    }
}

/// `‖z − z*‖²`: a surrogate with a known minimizer for testing guidance.
#[derive(Debug, Clone)]
pub struct TargetEnergy {
    pub target: Array4<f64>,
}

impl GuidanceEnergy for TargetEnergy {
    fn evaluate(&self, ctx: &EnergyContext) -> Result<EnergyEval> {
        if ctx.z_edi.dim() != self.target.dim() {
            return Err(Error::Validation("target energy shape mismatch".into()));
        }
        let diff = ctx.z_edi - &self.target;
        let value = diff.iter().map(|d| d * d).sum();
        Ok(EnergyEval {
            value,
            components: vec![("target", value)],
            grad: diff * 2.0,
        })
    }
}
