//! Training objective: boundary-weighted BCE + IoU on mask logits, soft
//! Dice on edge logits, summed over however many outputs a variant emits.
//!
//! The pixel weight map emphasizes boundary regions: `w = 1 + 5·|box(G) − G|`
//! where `box` is a 31×31 stride-1 box average whose divisor is the number
//! of in-bounds taps (so constant ground truth gives exactly `w ≡ 1`, and a
//! flat map with centered logits reduces the weighted BCE to plain `ln 2`).
//! Each term is computed per sample and averaged over the batch; the total
//! is a plain sum of terms, so a variant without edge outputs simply has no
//! Dice contribution.

use std::sync::Arc;

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

/// Box-filter half-width: the 31×31 window that defines boundary weights.
const POOL_RADIUS: usize = 15;
/// Boundary emphasis factor in `w = 1 + 5·|box(G) − G|`.
const BOUNDARY_GAIN: f64 = 5.0;
/// Laplace-style stabilizer in the weighted IoU and Dice ratios.
const RATIO_EPS: f64 = 1.0;

/// Box average of a single map with the valid-count divisor, via an
/// integral image (O(HW) regardless of window size).
fn box_average_valid(g: &Array2<f64>, radius: usize) -> Array2<f64> {
    let (h, w) = g.dim();
    let mut integral = Array2::<f64>::zeros((h + 1, w + 1));
    for y in 0..h {
        for x in 0..w {
            integral[[y + 1, x + 1]] =
                g[[y, x]] + integral[[y, x + 1]] + integral[[y + 1, x]] - integral[[y, x]];
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        let y0 = y.saturating_sub(radius);
        let y1 = (y + radius).min(h - 1);
        for x in 0..w {
            let x0 = x.saturating_sub(radius);
            let x1 = (x + radius).min(w - 1);
            let sum = integral[[y1 + 1, x1 + 1]] - integral[[y0, x1 + 1]] - integral[[y1 + 1, x0]]
                + integral[[y0, x0]];
            let count = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
            out[[y, x]] = sum / count;
        }
    }
    out
}

/// Per-pixel boundary weights `1 + 5·|box(G) − G|` for a `[N,1,H,W]` mask.
pub fn boundary_weight_map(gt: &ArrayD<f64>) -> ArrayD<f64> {
    let s = gt.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let mut out = ArrayD::zeros(IxDyn(&[n, 1, h, w]));
    for i in 0..n {
        let plane = gt
            .index_axis(Axis(0), i)
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("gt plane is 2-d");
        let avg = box_average_valid(&plane, POOL_RADIUS);
        let mut dst = out.index_axis_mut(Axis(0), i);
        let mut dst = dst.index_axis_mut(Axis(0), 0);
        for y in 0..h {
            for x in 0..w {
                dst[[y, x]] = 1.0 + BOUNDARY_GAIN * (avg[[y, x]] - plane[[y, x]]).abs();
            }
        }
    }
    out
}

/// Reject logit/target pairs the losses are not defined for.
fn validate_pair<T: Scalar>(
    context: &str,
    tape: &Tape<T>,
    logits: NodeId,
    gt: &ArrayD<f64>,
) -> Result<()> {
    let ls = tape.value(logits).shape();
    let gs = gt.shape();
    if gs.len() != 4 || gs[1] != 1 {
        return Err(Error::shape(context, "[N,1,H,W] ground truth", format!("{gs:?}")));
    }
    if ls != gs {
        return Err(Error::shape(context, format!("{gs:?}"), format!("{ls:?}")));
    }
    if gt.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidInput(format!(
            "{context}: ground-truth values must lie in [0,1]"
        )));
    }
    Ok(())
}

fn to_t<T: Scalar>(a: &ArrayD<f64>) -> ArrayD<T> {
    a.mapv(T::c)
}

/// `[Σ over sample 0, …]` of `a` as a constant `[N]` node.
fn per_sample_sums_const<T: Scalar>(tape: &mut Tape<T>, a: &ArrayD<f64>) -> NodeId {
    let n = a.shape()[0];
    let mut sums = ArrayD::zeros(IxDyn(&[n]));
    for i in 0..n {
        sums[[i]] = T::c(a.index_axis(Axis(0), i).sum());
    }
    tape.constant(sums)
}

/// Mean of an `[N]` node as a 0-dim node.
fn mean_per_sample<T: Scalar>(tape: &mut Tape<T>, v: NodeId) -> NodeId {
    let n = tape.value(v).shape()[0];
    let coeff = Arc::new(ArrayD::from_elem(IxDyn(&[n]), T::c(1.0 / n as f64)));
    tape.dot_const(v, coeff)
}

/// Boundary-weighted binary cross-entropy with a precomputed weight map.
fn weighted_bce_with<T: Scalar>(
    tape: &mut Tape<T>,
    logits: NodeId,
    gt: &ArrayD<f64>,
    weights: &ArrayD<f64>,
) -> NodeId {
    // Fold the per-sample normalization Σw and the batch mean into one
    // coefficient map: loss = Σ_{n,p} bce_{n,p} · w_{n,p} / (N · Σ_p w_{n,p}).
    let n = gt.shape()[0];
    let mut coeff = weights.clone();
    for i in 0..n {
        let denom = weights.index_axis(Axis(0), i).sum() * n as f64;
        coeff.index_axis_mut(Axis(0), i).mapv_inplace(|w| w / denom);
    }
    let bce = tape.bce_with_logits(logits, Arc::new(to_t::<T>(gt)));
    tape.dot_const(bce, Arc::new(to_t::<T>(&coeff)))
}

/// Boundary-weighted soft IoU with a precomputed weight map.
fn weighted_iou_with<T: Scalar>(
    tape: &mut Tape<T>,
    logits: NodeId,
    gt: &ArrayD<f64>,
    weights: &ArrayD<f64>,
) -> NodeId {
    let eps = T::c(RATIO_EPS);
    let w_const = Arc::new(to_t::<T>(weights));
    let wg = weights * gt;

    let p = tape.sigmoid(logits);
    let inter_map = tape.mul_const(p, Arc::new(to_t::<T>(&wg)));
    let inter = tape.sum_per_sample(inter_map);
    let wp_map = tape.mul_const(p, w_const);
    let wp = tape.sum_per_sample(wp_map);
    // union = Σw·p + Σw·G − Σw·p·G, per sample
    let wg_sums = per_sample_sums_const(tape, &wg);
    let wp_plus_wg = tape.add(wp, wg_sums);
    let neg_inter = tape.scalar_affine(inter, -T::one(), T::zero());
    let union = tape.add(wp_plus_wg, neg_inter);

    let num = tape.scalar_affine(inter, T::one(), eps);
    let den = tape.scalar_affine(union, T::one(), eps);
    let ratio = tape.div(num, den);
    let mean = mean_per_sample(tape, ratio);
    tape.scalar_affine(mean, -T::one(), T::one())
}

/// Boundary-weighted BCE over a batch of mask logits: per-pixel BCE
/// weighted by `w`, normalized by `Σw` per sample, averaged over the batch.
pub fn weighted_bce<T: Scalar>(tape: &mut Tape<T>, logits: NodeId, gt: &ArrayD<f64>) -> Result<NodeId> {
    validate_pair("weighted_bce", tape, logits, gt)?;
    let w = boundary_weight_map(gt);
    Ok(weighted_bce_with(tape, logits, gt, &w))
}

/// Boundary-weighted soft IoU loss:
/// `1 − (Σw·p·G + 1)/(Σw·(p + G − p·G) + 1)`, averaged over the batch.
/// A perfect binary prediction scores exactly 0.
pub fn weighted_iou<T: Scalar>(tape: &mut Tape<T>, logits: NodeId, gt: &ArrayD<f64>) -> Result<NodeId> {
    validate_pair("weighted_iou", tape, logits, gt)?;
    let w = boundary_weight_map(gt);
    Ok(weighted_iou_with(tape, logits, gt, &w))
}

/// Soft Dice loss on edge logits:
/// `1 − (2·Σe·G + 1)/(Σe + ΣG + 1)`, averaged over the batch. The `+1`
/// keeps empty-edge samples defined (loss 0 when both are empty).
pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, logits: NodeId, gt: &ArrayD<f64>) -> Result<NodeId> {
    validate_pair("dice_loss", tape, logits, gt)?;
    let eps = T::c(RATIO_EPS);
    let e = tape.sigmoid(logits);
    let inter_map = tape.mul_const(e, Arc::new(to_t::<T>(gt)));
    let inter = tape.sum_per_sample(inter_map);
    let esum = tape.sum_per_sample(e);

    let two = T::c(2.0);
    let num = tape.scalar_affine(inter, two, eps);
    let mut gsums = ArrayD::zeros(IxDyn(&[gt.shape()[0]]));
    for i in 0..gt.shape()[0] {
        gsums[[i]] = T::c(gt.index_axis(Axis(0), i).sum() + RATIO_EPS);
    }
    let gsums = tape.constant(gsums);
    let den = tape.add(esum, gsums);
    let ratio = tape.div(num, den);
    let mean = mean_per_sample(tape, ratio);
    Ok(tape.scalar_affine(mean, -T::one(), T::one()))
}

/// Component values of one total-loss evaluation, for logs.
#[derive(Debug, Clone, Serialize)]
pub struct LossBreakdown {
    pub mask_bce: Vec<f64>,
    pub mask_iou: Vec<f64>,
    pub edge_dice: Vec<f64>,
    pub total: f64,
}

/// Combined objective: `Σ_i [wBCE(Mᵢ) + wIoU(Mᵢ)] + Σ_j Dice(Eⱼ)` over
/// whatever mask and edge outputs the caller provides (absent outputs
/// simply contribute nothing).
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    mask_logits: &[NodeId],
    edge_logits: &[NodeId],
    gt_mask: &ArrayD<f64>,
    gt_edge: &ArrayD<f64>,
) -> Result<(NodeId, LossBreakdown)> {
    if mask_logits.is_empty() {
        return Err(Error::InvalidInput(
            "total_loss: at least one mask output is required".into(),
        ));
    }
    for &m in mask_logits {
        validate_pair("total_loss(mask)", tape, m, gt_mask)?;
    }
    for &e in edge_logits {
        validate_pair("total_loss(edge)", tape, e, gt_edge)?;
    }

    let w = boundary_weight_map(gt_mask);
    let mut terms = Vec::new();
    let mut breakdown = LossBreakdown {
        mask_bce: Vec::new(),
        mask_iou: Vec::new(),
        edge_dice: Vec::new(),
        total: 0.0,
    };
    for &m in mask_logits {
        let bce = weighted_bce_with(tape, m, gt_mask, &w);
        let iou = weighted_iou_with(tape, m, gt_mask, &w);
        breakdown.mask_bce.push(tape.scalar_value(bce).to_f64());
        breakdown.mask_iou.push(tape.scalar_value(iou).to_f64());
        terms.push(bce);
        terms.push(iou);
    }
    for &e in edge_logits {
        let dice = dice_loss(tape, e, gt_edge)?;
        breakdown.edge_dice.push(tape.scalar_value(dice).to_f64());
        terms.push(dice);
    }
    let total = tape.scalar_sum(&terms);
    breakdown.total = tape.scalar_value(total).to_f64();
    Ok((total, breakdown))
}
