//! Training objectives: down-weighted binary cross-entropy for
//! classification, generalized-IoU plus L1 for box regression, MSE for IoU
//! prediction, and dice plus focal for segmentation.

use crate::heads::BBoxN;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Coefficients of the combined objectives.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_giou: Real,
    pub lambda_l1: Real,
    pub lambda_dice: Real,
    pub lambda_focal: Real,
    pub neg_weight: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_giou: 2.0,
            lambda_l1: 5.0,
            lambda_dice: 1.0,
            lambda_focal: 1.0,
            neg_weight: 1.0 / 16.0,
        }
    }
}

/// Probability clamp for every log term.
pub const PROB_CLAMP: Real = 1e-7;
/// Dice smoothing term.
pub const DICE_EPS: Real = 1.0;
/// Focal loss exponent.
pub const FOCAL_GAMMA: Real = 2.0;
/// Focal loss positive-class weight.
pub const FOCAL_ALPHA: Real = 0.25;

fn interval_overlap(a0: Real, a1: Real, b0: Real, b1: Real) -> Real {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Plain intersection-over-union; any zero-area operand gives 0.
pub fn iou(a: &BBoxN, b: &BBoxN) -> Real {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let inter = interval_overlap(ax0, ax1, bx0, bx1) * interval_overlap(ay0, ay1, by0, by1);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU − |C∖(A∪B)|/|C|` with C the smallest enclosing box.
/// Equals 1 on identical boxes and approaches −1 for far-apart boxes.
pub fn giou(a: &BBoxN, b: &BBoxN) -> Real {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let inter = interval_overlap(ax0, ax1, bx0, bx1) * interval_overlap(ay0, ay1, by0, by1);
    let union = a.area() + b.area() - inter;
    let i = if union <= 0.0 { 0.0 } else { inter / union };
    let enclose = (ax1.max(bx1) - ax0.min(bx0)).max(0.0) * (ay1.max(by1) - ay0.min(by0)).max(0.0);
    if enclose <= 0.0 {
        i
    } else {
        i - (enclose - union.max(0.0)) / enclose
    }
}

/// Classification loss with an explicit negative-class weight: mean over all
/// tokens of `−[y·ln p + (1−y)·w_neg·ln(1−p)]`, probabilities clamped away
/// from 0 and 1.
pub fn cls_loss_weighted(tape: &mut Tape, p: Var, labels: &[bool], neg_weight: Real) -> Var {
    let n = tape.shape(p).iter().product::<usize>();
    assert_eq!(n, labels.len(), "cls_loss label count");
    let w_pos: Vec<Real> = labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
    let w_neg: Vec<Real> = labels
        .iter()
        .map(|&y| if y { 0.0 } else { neg_weight })
        .collect();
    let shape = tape.shape(p).to_vec();
    let wp = tape.input(Tensor::new(&shape, w_pos));
    let wn = tape.input(Tensor::new(&shape, w_neg));
    let pc = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = tape.log(pc);
    let neg_p = tape.neg(pc);
    let one_m = tape.add_scalar(neg_p, 1.0);
    let log_q = tape.log(one_m);
    let pos_term = tape.mul(wp, log_p);
    let neg_term = tape.mul(wn, log_q);
    let both = tape.add(pos_term, neg_term);
    let m = tape.mean(both);
    tape.neg(m)
}

/// Classification loss with the default 1/16 negative weight.
pub fn cls_loss(tape: &mut Tape, p: Var, labels: &[bool]) -> Var {
    cls_loss_weighted(tape, p, labels, LossWeights::default().neg_weight)
}

/// Differentiable GIoU of each predicted box row against a fixed ground
/// truth; `boxes` is `[k×4]` in (cx,cy,w,h), output is `[k×1]`.
pub fn giou_var(tape: &mut Tape, boxes: Var, gt: &BBoxN) -> Var {
    let k = tape.shape(boxes)[0];
    assert_eq!(tape.shape(boxes)[1], 4, "giou_var box width");
    assert!(!gt.is_degenerate(), "giou_var needs a valid ground truth");
    let cx = tape.col_slice(boxes, 0, 1);
    let cy = tape.col_slice(boxes, 1, 2);
    let w = tape.col_slice(boxes, 2, 3);
    let h = tape.col_slice(boxes, 3, 4);
    let half_w = tape.scale(w, 0.5);
    let half_h = tape.scale(h, 0.5);
    let x0 = tape.sub(cx, half_w);
    let x1 = tape.add(cx, half_w);
    let y0 = tape.sub(cy, half_h);
    let y1 = tape.add(cy, half_h);
    let (gx0, gy0, gx1, gy1) = gt.corners();
    let col = |tape: &mut Tape, v: Real| tape.input(Tensor::full(&[k, 1], v));
    let gx0v = col(tape, gx0);
    let gx1v = col(tape, gx1);
    let gy0v = col(tape, gy0);
    let gy1v = col(tape, gy1);

    let ix0 = tape.maximum(x0, gx0v);
    let ix1 = tape.minimum(x1, gx1v);
    let iy0 = tape.maximum(y0, gy0v);
    let iy1 = tape.minimum(y1, gy1v);
    let iw_raw = tape.sub(ix1, ix0);
    let ih_raw = tape.sub(iy1, iy0);
    let iw = tape.relu(iw_raw);
    let ih = tape.relu(ih_raw);
    let inter = tape.mul(iw, ih);

    let area_p = tape.mul(w, h);
    let sum_areas = tape.add_scalar(area_p, gt.area());
    let union = tape.sub(sum_areas, inter);
    let iou = tape.div(inter, union);

    let ex0 = tape.minimum(x0, gx0v);
    let ex1 = tape.maximum(x1, gx1v);
    let ey0 = tape.minimum(y0, gy0v);
    let ey1 = tape.maximum(y1, gy1v);
    let ew = tape.sub(ex1, ex0);
    let eh = tape.sub(ey1, ey0);
    let enclose = tape.mul(ew, eh);
    let slack = tape.sub(enclose, union);
    let penalty = tape.div(slack, enclose);
    tape.sub(iou, penalty)
}

/// Regression loss over positive tokens: mean of
/// `λ_G·(1−GIoU) + λ_1·Σ|coordinate difference|`. Zero positives give a
/// zero loss and a raised flag.
pub fn reg_loss(
    tape: &mut Tape,
    boxes: Var,
    gt: &BBoxN,
    positives: &[usize],
) -> (Var, bool) {
    let lw = LossWeights::default();
    if positives.is_empty() {
        return (tape.scalar(0.0), true);
    }
    let k = positives.len();
    let pos = tape.gather_rows(boxes, positives);
    let g = giou_var(tape, pos, gt);
    let neg_g = tape.neg(g);
    let one_minus = tape.add_scalar(neg_g, 1.0);
    let giou_term = tape.mean(one_minus);

    let gt_mat = tape.input(Tensor::new(
        &[k, 4],
        (0..k).flat_map(|_| [gt.cx, gt.cy, gt.w, gt.h]).collect(),
    ));
    let diff = tape.sub(pos, gt_mat);
    let l1 = tape.abs(diff);
    let l1_sum = tape.sum(l1);

    let a = tape.scale(giou_term, lw.lambda_giou);
    let b = tape.scale(l1_sum, lw.lambda_l1 / k as Real);
    (tape.add(a, b), false)
}

/// MSE between predicted IoU and the plain IoU of the (detached) predicted
/// boxes, over positive tokens only.
pub fn iou_pred_loss(
    tape: &mut Tape,
    iou_pred: Var,
    boxes_value: &Tensor,
    gt: &BBoxN,
    positives: &[usize],
) -> (Var, bool) {
    if positives.is_empty() {
        return (tape.scalar(0.0), true);
    }
    let preds2d = {
        let n = tape.shape(iou_pred).iter().product::<usize>();
        tape.reshape(iou_pred, &[n, 1])
    };
    let pos = tape.gather_rows(preds2d, positives);
    let boxes = crate::heads::boxes_from_tensor(boxes_value);
    let targets: Vec<Real> = positives.iter().map(|&i| iou(&boxes[i], gt)).collect();
    let t = tape.input(Tensor::new(&[positives.len(), 1], targets));
    let d = tape.sub(pos, t);
    let sq = tape.pow_const(d, 2.0);
    (tape.mean(sq), false)
}

/// Dice loss `1 − (2·Σ m·m̂ + ε)/(Σm + Σm̂ + ε)` with ε = 1.
pub fn dice_loss(tape: &mut Tape, m: Var, m_hat: &Tensor) -> Var {
    assert_eq!(tape.shape(m), m_hat.shape(), "dice mask shapes");
    let mh = tape.input(m_hat.clone());
    let prod = tape.mul(m, mh);
    let inter = tape.sum(prod);
    let num_raw = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num_raw, DICE_EPS);
    let sm = tape.sum(m);
    let smh: Real = m_hat.data().iter().sum();
    let den_raw = tape.add_scalar(sm, smh);
    let den = tape.add_scalar(den_raw, DICE_EPS);
    let ratio = tape.div(num, den);
    let nr = tape.neg(ratio);
    tape.add_scalar(nr, 1.0)
}

/// Focal loss with explicit parameters: mean of `−α_t·(1−p_t)^γ·ln p_t`
/// where `p_t` is the predicted probability of the true class and
/// `α_t` is `alpha` on positives, `1−alpha` on negatives.
pub fn focal_loss_with(
    tape: &mut Tape,
    m: Var,
    m_hat: &Tensor,
    gamma: Real,
    alpha: Real,
) -> Var {
    assert_eq!(tape.shape(m), m_hat.shape(), "focal mask shapes");
    assert!(m_hat.data().iter().all(|&v| v == 0.0 || v == 1.0), "focal target must be binary");
    let shape = m_hat.shape().to_vec();
    let w_pos = tape.input(m_hat.clone());
    let alpha_t: Vec<Real> = m_hat
        .data()
        .iter()
        .map(|&y| if y == 1.0 { alpha } else { 1.0 - alpha })
        .collect();
    let at = tape.input(Tensor::new(&shape, alpha_t));
    // p_t = m̂·m + (1−m̂)·(1−m) = 1 − m − m̂ + 2·m·m̂
    let prod = tape.mul(w_pos, m);
    let two_prod = tape.scale(prod, 2.0);
    let nm = tape.neg(m);
    let nmh = tape.neg(w_pos);
    let s1 = tape.add(nm, nmh);
    let s2 = tape.add(s1, two_prod);
    let pt = tape.add_scalar(s2, 1.0);
    let ptc = tape.clamp(pt, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let one_minus_pt = {
        let n = tape.neg(ptc);
        tape.add_scalar(n, 1.0)
    };
    let mod_factor = tape.pow_const(one_minus_pt, gamma);
    let log_pt = tape.log(ptc);
    let weighted = tape.mul(at, mod_factor);
    let terms = tape.mul(weighted, log_pt);
    let m_all = tape.mean(terms);
    tape.neg(m_all)
}

/// Focal loss with γ=2, α=0.25.
pub fn focal_loss(tape: &mut Tape, m: Var, m_hat: &Tensor) -> Var {
    focal_loss_with(tape, m, m_hat, FOCAL_GAMMA, FOCAL_ALPHA)
}

/// Segmentation objective: dice plus focal, unit weights.
pub fn seg_loss(tape: &mut Tape, m: Var, m_hat: &Tensor) -> Var {
    let lw = LossWeights::default();
    let d = dice_loss(tape, m, m_hat);
    let f = focal_loss(tape, m, m_hat);
    let ds = tape.scale(d, lw.lambda_dice);
    let fs = tape.scale(f, lw.lambda_focal);
    tape.add(ds, fs)
}
