//! Edit, origin and unedited masks at each feature resolution.
//!
//! Each visible drag pair contributes a 3×3 pixel patch around its source
//! `p` (origin mask) and its target `q` (edit mask). At a layer of stride
//! `s` a patch covers `n = ceil(3 / s)` cells per side, centered on the cell
//! holding the handle. Source and target cells are paired by their offset
//! inside the patch so the two masked feature vectors line up.

use std::collections::BTreeSet;

use ndarray::Array2;

use crate::drag::DragSet;
use crate::error::{Error, Result};

const PATCH: usize = 3;

/// Masks of one view at one feature layer. Cells are `(row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewMasks {
    /// `(origin cell, edit cell)` correspondences, deduplicated and sorted.
    pub pairs: Vec<((usize, usize), (usize, usize))>,
    pub origin: Array2<bool>,
    pub edit: Array2<bool>,
    pub unedited: Array2<bool>,
}

impl ViewMasks {
    pub fn unedited_cells(&self) -> Vec<(usize, usize)> {
        self.unedited.indexed_iter().filter(|(_, &m)| m).map(|(c, _)| c).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMasks {
    pub stride: usize,
    /// Indexed by view.
    pub views: Vec<ViewMasks>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyMasks {
    /// One entry per backend feature layer, in layer order.
    pub layers: Vec<LayerMasks>,
}

/// Builds masks for every layer stride from projected drags on an
/// `image_size`² image.
pub fn build_masks(drags: &DragSet, image_size: usize, strides: &[usize]) -> Result<EnergyMasks> {
    if !drags.is_projected() {
        return Err(Error::Validation("drag pairs must be projected before building masks".into()));
    }
    if strides.contains(&0) {
        return Err(Error::Validation("feature stride 0".into()));
    }
    let layers = strides
        .iter()
        .map(|&stride| LayerMasks {
            stride,
            views: (0..4).map(|v| view_masks(drags, v, image_size, stride)).collect(),
        })
        .collect();
    Ok(EnergyMasks { layers })
}

fn view_masks(drags: &DragSet, view: usize, image_size: usize, stride: usize) -> ViewMasks {
    let cells = image_size.div_ceil(stride);
    let n = PATCH.div_ceil(stride) as i64;
    let lo = -(n - 1) / 2;
    let mut pairs = BTreeSet::new();
    let mut origin = Array2::from_elem((cells, cells), false);
    let mut edit = Array2::from_elem((cells, cells), false);
    let in_range = |v: i64| (0..cells as i64).contains(&v);
    let s = stride as i64;
    for pp in drags.visible_in(view) {
        // Pixel coordinates are [column, row].
        let (pr, pc) = (pp.p[1].div_euclid(s), pp.p[0].div_euclid(s));
        let (qr, qc) = (pp.q[1].div_euclid(s), pp.q[0].div_euclid(s));
        for dy in lo..lo + n {
            for dx in lo..lo + n {
                let (sr, sc, er, ec) = (pr + dy, pc + dx, qr + dy, qc + dx);
                if in_range(sr) && in_range(sc) {
                    origin[[sr as usize, sc as usize]] = true;
                }
                if in_range(er) && in_range(ec) {
                    edit[[er as usize, ec as usize]] = true;
                }
                if in_range(sr) && in_range(sc) && in_range(er) && in_range(ec) {
                    pairs.insert(((sr as usize, sc as usize), (er as usize, ec as usize)));
                }
            }
        }
    }
    let touched = &origin | &edit;
    let mut unedited = Array2::from_elem((cells, cells), true);
    for ((r, c), _) in touched.indexed_iter().filter(|(_, &m)| m) {
        for rr in r.saturating_sub(1)..=(r + 1).min(cells - 1) {
            for cc in c.saturating_sub(1)..=(c + 1).min(cells - 1) {
                unedited[[rr, cc]] = false;
            }
        }
    }
    ViewMasks {
        pairs: pairs.into_iter().collect(),
        origin,
        edit,
        unedited,
    }
}
