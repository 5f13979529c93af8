//! Dragging Accuracy Index: how well content at each source handle in the
//! original views reappears at the matching destination handle in the
//! edited views.
//!
//! For a view `i` and a pair visible in it, the term is the squared RGB
//! difference between the `(2γ+1)²` patch around `p` in the original and
//! the patch around `q` in the edit, divided by the number of patch cells.
//! A cell offset is used only when it falls inside the image at both
//! centers; excluded offsets leave the normalizer too. The score sums the
//! terms over visible pairs and averages over the four views.

use std::collections::BTreeMap;

use ndarray::{s, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drag::DragSet;
use crate::error::{Error, Result};
use crate::views::MultiViewImageSet;

pub const GAMMAS: [usize; 5] = [1, 3, 5, 7, 10];

/// Resolution at which reported scores are comparable.
pub const REFERENCE_RESOLUTION: usize = 256;

/// One (view, pair) term of the index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DaiTerm {
    pub view: usize,
    pub pair: usize,
    pub value: f64,
    /// Patch cells that entered the normalizer.
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaScore {
    /// Sum over visible pairs, averaged over views.
    pub dai: f64,
    /// `dai` divided by the number of pairs visible in at least one view.
    pub per_pair: f64,
    pub terms: Vec<DaiTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaiReport {
    /// Keyed by γ as a string: "1", "3", "5", "7", "10".
    pub gammas: BTreeMap<String, GammaScore>,
    pub pairs: usize,
    /// Occluded pairs per view.
    pub culled_per_view: [usize; 4],
    /// Pairs hidden in every view; they contribute to no score.
    pub fully_occluded: Vec<usize>,
    /// Slot for an externally computed preference rating.
    #[serde(default)]
    pub external_elo: Option<f64>,
}

impl DaiReport {
    pub fn score(&self, gamma: usize) -> Option<f64> {
        self.gammas.get(&gamma.to_string()).map(|g| g.dai)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_inputs(original: &MultiViewImageSet, edited: &MultiViewImageSet, drags: &DragSet) -> Result<()> {
    original.validate()?;
    edited.validate()?;
    let (a, b) = (original.resolution(), edited.resolution());
    if a != b {
        return Err(Error::Validation(format!("original views are {a}px but edited views are {b}px")));
    }
    if !drags.is_projected() {
        return Err(Error::Validation("drag set must be projected onto the original views".into()));
    }
    drags.validate()
}

/// Offset range `[lo, hi]` along one axis keeping both `p + d` and `q + d`
/// inside `[0, r)`.
fn overlap(p: i64, q: i64, gamma: i64, r: i64) -> Option<(i64, i64)> {
    let lo = (-gamma).max(-p).max(-q);
    let hi = gamma.min(r - 1 - p).min(r - 1 - q);
    (lo <= hi).then_some((lo, hi))
}

fn patch_term(a: &Array3<f64>, b: &Array3<f64>, p: [i64; 2], q: [i64; 2], gamma: usize) -> (f64, usize) {
    let r = a.dim().0 as i64;
    let g = gamma as i64;
    let (Some((x0, x1)), Some((y0, y1))) = (overlap(p[0], q[0], g, r), overlap(p[1], q[1], g, r)) else {
        return (0.0, 0);
    };
    let pa = a.slice(s![(p[1] + y0) as usize..=(p[1] + y1) as usize, (p[0] + x0) as usize..=(p[0] + x1) as usize, ..]);
    let pb = b.slice(s![(q[1] + y0) as usize..=(q[1] + y1) as usize, (q[0] + x0) as usize..=(q[0] + x1) as usize, ..]);
    let sum: f64 = pa.iter().zip(pb.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    let cells = ((x1 - x0 + 1) * (y1 - y0 + 1)) as usize;
    (sum / cells as f64, cells)
}

fn terms(original: &MultiViewImageSet, edited: &MultiViewImageSet, drags: &DragSet, gamma: usize) -> Vec<DaiTerm> {
    let visible: Vec<_> = (0..4).flat_map(|i| drags.visible_in(i).copied()).collect();
    visible
        .par_iter()
        .map(|pp| {
            let (value, cells) = patch_term(&original.views[pp.view].rgb, &edited.views[pp.view].rgb, pp.p, pp.q, gamma);
            DaiTerm {
                view: pp.view,
                pair: pp.pair,
                value,
                cells,
            }
        })
        .collect()
}

/// The index at one patch radius. `drags` must carry projections computed
/// on the original views.
pub fn dai(original: &MultiViewImageSet, edited: &MultiViewImageSet, drags: &DragSet, gamma: usize) -> Result<f64> {
    check_inputs(original, edited, drags)?;
    Ok(terms(original, edited, drags, gamma).iter().map(|t| t.value).sum::<f64>() / 4.0)
}

pub fn dai_report(original: &MultiViewImageSet, edited: &MultiViewImageSet, drags: &DragSet) -> Result<DaiReport> {
    check_inputs(original, edited, drags)?;
    if original.resolution() != REFERENCE_RESOLUTION {
        log::warn!("scoring at {}px; reference scores use {REFERENCE_RESOLUTION}px", original.resolution());
    }
    let fully_occluded = drags.fully_occluded();
    let counted = drags.k() - fully_occluded.len();
    let gammas = GAMMAS
        .par_iter()
        .map(|&g| {
            let terms = terms(original, edited, drags, g);
            let dai = terms.iter().map(|t| t.value).sum::<f64>() / 4.0;
            let per_pair = if counted == 0 { 0.0 } else { dai / counted as f64 };
            (g.to_string(), GammaScore { dai, per_pair, terms })
        })
        .collect();
    let mut culled_per_view = [0; 4];
    for (i, c) in culled_per_view.iter_mut().enumerate() {
        *c = drags.projections[i].iter().filter(|p| !p.visible).count();
    }
    Ok(DaiReport {
        gammas,
        pairs: drags.k(),
        culled_per_view,
        fully_occluded,
        external_elo: None,
    })
}
