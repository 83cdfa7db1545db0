//! Training objective over [`OutputMaps`]: penalty-reduced focal loss for the two
//! heatmaps, masked L1 for the five regression heads, their weighted sum, and
//! the min-over-variants symmetric loss. Every term has an analytic gradient.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::NUM_VERTICES;
use crate::labelgen::{Cell, EncodedScene, Head, LabelMasks, OutputMaps};
use crate::tensor::FeatureMap;

/// Predictions are clamped to `[PRED_EPS, 1 - PRED_EPS]` before taking logs.
pub const PRED_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 4.0 }
    }
}

/// One weight per loss term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub center_heatmap: f64,
    pub center_offset: f64,
    pub bbox: f64,
    pub kp_heatmap: f64,
    pub kp_offset: f64,
    pub displacement: f64,
    pub dims: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            center_heatmap: 1.0,
            center_offset: 1.0,
            bbox: 0.1,
            kp_heatmap: 1.0,
            kp_offset: 1.0,
            displacement: 1.0,
            dims: 1.0,
        }
    }
}

impl LossWeights {
    pub fn weight(&self, head: Head) -> f64 {
        match head {
            Head::CenterHeatmap => self.center_heatmap,
            Head::CenterOffset => self.center_offset,
            Head::BboxSize => self.bbox,
            Head::KpDisplacements => self.displacement,
            Head::KpHeatmaps => self.kp_heatmap,
            Head::KpOffsets => self.kp_offset,
            Head::RelDims => self.dims,
        }
    }

    pub fn weight_mut(&mut self, head: Head) -> &mut f64 {
        match head {
            Head::CenterHeatmap => &mut self.center_heatmap,
            Head::CenterOffset => &mut self.center_offset,
            Head::BboxSize => &mut self.bbox,
            Head::KpDisplacements => &mut self.displacement,
            Head::KpHeatmaps => &mut self.kp_heatmap,
            Head::KpOffsets => &mut self.kp_offset,
            Head::RelDims => &mut self.dims,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut w = *self;
        for h in Head::ALL {
            *w.weight_mut(h) *= c;
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        if Head::ALL.iter().all(|h| self.weight(*h) >= 0.0 && self.weight(*h).is_finite()) {
            Ok(())
        } else {
            Err(invalid("loss weights must be finite and non-negative"))
        }
    }
}

/// Neumaier-compensated sum; loss values aggregate ~10^5 cells.
#[derive(Default)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[inline]
fn clamp_pred(y: f64) -> (f64, bool) {
    if y < PRED_EPS {
        (PRED_EPS, true)
    } else if y > 1.0 - PRED_EPS {
        (1.0 - PRED_EPS, true)
    } else {
        (y, false)
    }
}

/// Per-cell focal value and its derivative w.r.t. the raw prediction (before `1/N`).
#[inline]
fn focal_cell(pred: f64, gt: f64, p: &FocalParams) -> (f64, f64) {
    let (y, clamped) = clamp_pred(pred);
    let (a, b) = (p.alpha, p.beta);
    if gt == 1.0 {
        let one_m = 1.0 - y;
        let v = one_m.powf(a) * y.ln();
        let dv = -a * one_m.powf(a - 1.0) * y.ln() + one_m.powf(a) / y;
        (-v, if clamped { 0.0 } else { -dv })
    } else {
        let w = (1.0 - gt).powf(b);
        let l = (1.0 - y).ln();
        let v = w * y.powf(a) * l;
        let dv = w * (a * y.powf(a - 1.0) * l - y.powf(a) / (1.0 - y));
        (-v, if clamped { 0.0 } else { -dv })
    }
}

/// Penalty-reduced focal loss averaged over `n` peaks. `n = 0` yields 0.
pub fn focal_loss(pred: &FeatureMap, gt: &FeatureMap, params: &FocalParams, n: usize) -> Result<f64> {
    pred.ensure_same_shape(gt, "focal loss")?;
    if n == 0 {
        return Ok(0.0);
    }
    let mut sum = CompensatedSum::default();
    for (y, g) in pred.data().iter().zip(gt.data()) {
        sum.add(focal_cell(*y, *g, params).0);
    }
    Ok(sum.value() / n as f64)
}

/// Focal loss and its gradient w.r.t. every prediction cell.
pub fn focal_loss_grad(
    pred: &FeatureMap,
    gt: &FeatureMap,
    params: &FocalParams,
    n: usize,
) -> Result<(f64, FeatureMap)> {
    pred.ensure_same_shape(gt, "focal loss")?;
    let mut grad = FeatureMap::zeros(pred.height(), pred.width(), pred.channels());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / n as f64;
    let mut sum = CompensatedSum::default();
    for ((y, g), d) in pred.data().iter().zip(gt.data()).zip(grad.data_mut()) {
        let (v, dv) = focal_cell(*y, *g, params);
        sum.add(v);
        *d = dv * inv;
    }
    Ok((sum.value() / n as f64, grad))
}

/// A labelled cell and the channels it supervises.
pub type MaskEntry = (Cell, Range<usize>);

/// Entries for heads supervised at the object center cell.
pub fn center_entries(masks: &LabelMasks, head: Head) -> Vec<MaskEntry> {
    masks.center_cells.iter().map(|c| (*c, 0..head.channels())).collect()
}

/// Entries for the keypoint-offset head.
pub fn keypoint_entries(masks: &LabelMasks) -> Vec<MaskEntry> {
    masks.keypoint_cells.iter().map(|(c, k)| (*c, 2 * k..2 * k + 2)).collect()
}

fn check_entries(pred: &FeatureMap, entries: &[MaskEntry]) -> Result<()> {
    for (c, r) in entries {
        if c.row >= pred.height() || c.col >= pred.width() || r.end > pred.channels() {
            return Err(invalid(format!("mask entry {c:?} {r:?} outside map {:?}", pred.shape())));
        }
    }
    Ok(())
}

/// `(1/N) Σ_entries Σ_channels |pred - gt|`, `N = entries.len()`.
pub fn masked_l1(pred: &FeatureMap, gt: &FeatureMap, entries: &[MaskEntry]) -> Result<f64> {
    Ok(masked_l1_grad(pred, gt, entries)?.0)
}

pub fn masked_l1_grad(pred: &FeatureMap, gt: &FeatureMap, entries: &[MaskEntry]) -> Result<(f64, FeatureMap)> {
    pred.ensure_same_shape(gt, "L1 loss")?;
    check_entries(pred, entries)?;
    let mut grad = FeatureMap::zeros(pred.height(), pred.width(), pred.channels());
    if entries.is_empty() {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / entries.len() as f64;
    let mut sum = CompensatedSum::default();
    for (c, chans) in entries {
        for ch in chans.clone() {
            let i = pred.index(c.row, c.col, ch);
            let d = pred.data()[i] - gt.data()[i];
            sum.add(d.abs());
            if d != 0.0 {
                grad.data_mut()[i] += d.signum() * inv;
            }
        }
    }
    Ok((sum.value() / entries.len() as f64, grad))
}

/// Unweighted and weighted values of each term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `(head, unweighted term, weighted term)` in [`Head::ALL`] order.
    pub terms: Vec<(Head, f64, f64)>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn term(&self, head: Head) -> f64 {
        self.terms.iter().find(|t| t.0 == head).map(|t| t.1).unwrap_or(0.0)
    }
}

/// One loss term (unweighted) and its gradient.
pub fn term_grad(
    head: Head,
    pred: &OutputMaps,
    labels: &OutputMaps,
    masks: &LabelMasks,
    focal: &FocalParams,
) -> Result<(f64, FeatureMap)> {
    let (p, g) = (pred.get(head), labels.get(head));
    match head {
        Head::CenterHeatmap => focal_loss_grad(p, g, focal, masks.num_objects),
        Head::KpHeatmaps => focal_loss_grad(p, g, focal, NUM_VERTICES * masks.num_objects),
        Head::KpOffsets => masked_l1_grad(p, g, &keypoint_entries(masks)),
        _ => masked_l1_grad(p, g, &center_entries(masks, head)),
    }
}

pub fn total_loss(pred: &OutputMaps, labels: &EncodedScene, weights: &LossWeights) -> Result<LossBreakdown> {
    Ok(total_loss_grad(pred, labels, weights)?.0)
}

/// Weighted sum of the seven terms and its gradient w.r.t. every prediction map.
pub fn total_loss_grad(
    pred: &OutputMaps,
    labels: &EncodedScene,
    weights: &LossWeights,
) -> Result<(LossBreakdown, OutputMaps)> {
    weights.validate()?;
    pred.validate()?;
    labels.maps.validate()?;
    let focal = FocalParams::default();
    let mut grads = OutputMaps::zeros(pred.height(), pred.width());
    let mut terms = Vec::with_capacity(7);
    let mut total = 0.0;
    for head in Head::ALL {
        let (v, mut g) = term_grad(head, pred, &labels.maps, &labels.masks, &focal)?;
        let w = weights.weight(head);
        g.map_inplace(|x| x * w);
        *grads.get_mut(head) = g;
        terms.push((head, v, w * v));
        total += w * v;
    }
    Ok((LossBreakdown { terms, total }, grads))
}

/// Minimum total loss over rotated label variants, and the index attaining it.
pub fn symmetric_loss(pred: &OutputMaps, variants: &[EncodedScene], weights: &LossWeights) -> Result<(f64, usize)> {
    if variants.is_empty() {
        return Err(invalid("symmetric loss needs at least one label variant"));
    }
    let mut best = (f64::INFINITY, 0);
    for (i, v) in variants.iter().enumerate() {
        let l = total_loss(pred, v, weights)?.total;
        if l < best.0 {
            best = (l, i);
        }
    }
    Ok(best)
}
