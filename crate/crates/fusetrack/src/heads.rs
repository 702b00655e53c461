//! Prediction heads over fused search tokens: per-token 2-way classification,
//! normalized box regression, IoU prediction, and the positive/negative
//! token assignment that drives the losses.

use crate::attention::TokenSeq;
use crate::tensor::param::{Init, ParamId, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Real;

/// Box normalized to the search region: center and extents in [0,1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBoxN {
    pub cx: Real,
    pub cy: Real,
    pub w: Real,
    pub h: Real,
}

impl BBoxN {
    pub fn new(cx: Real, cy: Real, w: Real, h: Real) -> Self {
        BBoxN { cx, cy, w, h }
    }

    /// (x0, y0, x1, y1)
    pub fn corners(&self) -> (Real, Real, Real, Real) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> Real {
        (self.w * self.h).max(0.0)
    }

    pub fn contains(&self, x: Real, y: Real) -> bool {
        let (x0, y0, x1, y1) = self.corners();
        x0 <= x && x <= x1 && y0 <= y && y <= y1
    }

    pub fn is_degenerate(&self) -> bool {
        self.w <= 0.0 || self.h <= 0.0
    }
}

/// Rows of an `[n×4]` tensor as boxes.
pub fn boxes_from_tensor(t: &crate::tensor::Tensor) -> Vec<BBoxN> {
    assert_eq!(t.shape().len(), 2);
    assert_eq!(t.shape()[1], 4);
    t.data()
        .chunks_exact(4)
        .map(|c| BBoxN::new(c[0], c[1], c[2], c[3]))
        .collect()
}

/// Affine layer chain with ReLU between layers and none after the last.
#[derive(Clone, Debug)]
pub struct MlpParams {
    layers: Vec<(ParamId, ParamId)>,
}

impl MlpParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl rand::Rng,
        prefix: &str,
        dims: &[usize],
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for l in 0..dims.len() - 1 {
            let w = store.add(
                &format!("{prefix}.l{l}.w"),
                &[dims[l], dims[l + 1]],
                Init::Xavier,
                rng,
            );
            let b = store.add(&format!("{prefix}.l{l}.b"), &[dims[l + 1]], Init::Zeros, rng);
            layers.push((w, b));
        }
        MlpParams { layers }
    }

    /// Forward pass; returns the output and every post-ReLU hidden layer.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> (Var, Vec<Var>) {
        let mut cur = x;
        let mut hidden = Vec::with_capacity(self.layers.len() - 1);
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let y = tape.matmul(cur, wv);
            cur = tape.add_row_bias(y, bv);
            if l + 1 < self.layers.len() {
                cur = tape.relu(cur);
                hidden.push(cur);
            }
        }
        (cur, hidden)
    }
}

/// Three-layer perceptron producing per-token (foreground, background) logits.
pub struct ClsHead {
    pub mlp: MlpParams,
    d: usize,
}

impl ClsHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl rand::Rng, prefix: &str, d: usize) -> Self {
        ClsHead { mlp: MlpParams::new(store, rng, prefix, &[d, d, d, 2]), d }
    }
}

/// Per-token 2-way logits, `[n×2]`.
pub fn classification_head(
    tape: &mut Tape,
    store: &ParamStore,
    head: &ClsHead,
    f: &TokenSeq,
) -> Var {
    assert_eq!(tape.shape(f.var)[1], head.d, "classification head width");
    head.mlp.forward(tape, store, f.var).0
}

/// Foreground probability per token: softmax over the 2 logits, component 0.
/// Returns `[n]`.
pub fn foreground_scores(tape: &mut Tape, logits: Var) -> Var {
    let n = tape.shape(logits)[0];
    let sm = tape.softmax(logits);
    let fg = tape.col_slice(sm, 0, 1);
    tape.reshape(fg, &[n])
}

/// Three-layer perceptron regressing one normalized box per token.
pub struct RegHead {
    pub mlp: MlpParams,
    d: usize,
}

impl RegHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl rand::Rng, prefix: &str, d: usize) -> Self {
        RegHead { mlp: MlpParams::new(store, rng, prefix, &[d, d, d, 4]), d }
    }
}

/// Boxes `[n×4]` in (cx,cy,w,h) after a final sigmoid, plus the second
/// hidden layer's post-ReLU activations `[n×d]` for the IoU head.
pub fn regression_head(
    tape: &mut Tape,
    store: &ParamStore,
    head: &RegHead,
    f: &TokenSeq,
) -> (Var, Var) {
    assert_eq!(tape.shape(f.var)[1], head.d, "regression head width");
    let (raw, hidden) = head.mlp.forward(tape, store, f.var);
    let boxes = tape.sigmoid(raw);
    (boxes, hidden[1])
}

/// Three-layer perceptron scoring predicted-box quality from the
/// concatenation of regression activations and fused tokens.
pub struct IouHead {
    pub mlp: MlpParams,
    d: usize,
}

impl IouHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl rand::Rng, prefix: &str, d: usize) -> Self {
        IouHead { mlp: MlpParams::new(store, rng, prefix, &[2 * d, d, d, 1]), d }
    }
}

/// Predicted IoU per token in (0,1), `[n]`.
pub fn iou_head(
    tape: &mut Tape,
    store: &ParamStore,
    head: &IouHead,
    reg_hidden: Var,
    f: &TokenSeq,
) -> Var {
    let n = tape.shape(f.var)[0];
    assert_eq!(tape.shape(f.var)[1], head.d, "iou head width");
    assert_eq!(tape.shape(reg_hidden), &[n, head.d], "iou head token count");
    let joint = tape.concat(1, &[reg_hidden, f.var]);
    let (raw, _) = head.mlp.forward(tape, store, joint);
    let s = tape.sigmoid(raw);
    tape.reshape(s, &[n])
}

/// Token centers of an `h×w` grid placed inside a `full_h×full_w` frame at
/// offset `(off_y, off_x)`, normalized by the full extents. Row-major.
pub fn offset_grid_centers(
    h: usize,
    w: usize,
    off_y: Real,
    off_x: Real,
    full_h: usize,
    full_w: usize,
) -> Vec<(Real, Real)> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            out.push((
                (j as Real + off_x + 0.5) / full_w as Real,
                (i as Real + off_y + 0.5) / full_h as Real,
            ));
        }
    }
    out
}

/// Normalized centers ((j+0.5)/W, (i+0.5)/H) of the token grid, row-major.
pub fn token_centers(h: usize, w: usize) -> Vec<(Real, Real)> {
    offset_grid_centers(h, w, 0.0, 0.0, h, w)
}

/// Positive/negative split of the token grid against a ground-truth box.
#[derive(Clone, Debug)]
pub struct Assignment {
    pub labels: Vec<bool>,
    /// Indices of positive tokens, ascending.
    pub positives: Vec<usize>,
    /// Set when the ground truth had a nonpositive extent.
    pub degenerate: bool,
}

/// Label token (i,j) positive iff its center lies inside `gt` (boundary
/// inclusive). Degenerate boxes produce an all-negative assignment with the
/// flag set. `grid` is (rows, cols).
pub fn assign_samples(gt: &BBoxN, grid: (usize, usize)) -> Assignment {
    let (h, w) = grid;
    assign_samples_at(gt, &token_centers(h, w))
}

/// As [`assign_samples`] over explicit token centers.
pub fn assign_samples_at(gt: &BBoxN, centers: &[(Real, Real)]) -> Assignment {
    if gt.is_degenerate() {
        return Assignment {
            labels: vec![false; centers.len()],
            positives: Vec::new(),
            degenerate: true,
        };
    }
    let labels: Vec<bool> = centers.iter().map(|&(x, y)| gt.contains(x, y)).collect();
    let positives = labels
        .iter()
        .enumerate()
        .filter_map(|(i, &p)| p.then_some(i))
        .collect();
    Assignment { labels, positives, degenerate: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{rng, Tensor};

    fn tokens(tape: &mut Tape, n: usize, d: usize, seed: u64) -> TokenSeq {
        let mut r = rng::stream(&[seed]);
        TokenSeq { var: tape.input(Tensor::uniform(&[n, d], -1.0, 1.0, &mut r)), grids: vec![(1, n)] }
    }

    fn zero_params(store: &mut ParamStore) {
        for id in store.ids() {
            store.value_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn zero_weights_give_uniform_foreground() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(&[1]);
        let head = ClsHead::new(&mut store, &mut r, "cls", 8, );
        zero_params(&mut store);
        let mut t = Tape::new();
        let f = tokens(&mut t, 5, 8, 2);
        let logits = classification_head(&mut t, &store, &head, &f);
        assert_eq!(t.shape(logits), &[5, 2]);
        assert!(t.value(logits).data().iter().all(|&v| v == 0.0));
        let fg = foreground_scores(&mut t, logits);
        assert_eq!(t.shape(fg), &[5]);
        assert!(t.value(fg).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_weights_regress_centered_half_boxes() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(&[3]);
        let head = RegHead::new(&mut store, &mut r, "reg", 8);
        zero_params(&mut store);
        let mut t = Tape::new();
        let f = tokens(&mut t, 6, 8, 4);
        let (boxes, hidden) = regression_head(&mut t, &store, &head, &f);
        assert_eq!(t.shape(boxes), &[6, 4]);
        assert_eq!(t.shape(hidden), &[6, 8]);
        assert!(t.value(boxes).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_weights_predict_half_iou() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(&[5]);
        let reg = RegHead::new(&mut store, &mut r, "reg", 8);
        let iou = IouHead::new(&mut store, &mut r, "iou", 8);
        zero_params(&mut store);
        let mut t = Tape::new();
        let f = tokens(&mut t, 4, 8, 6);
        let (_, hidden) = regression_head(&mut t, &store, &reg, &f);
        let p = iou_head(&mut t, &store, &iou, hidden, &f);
        assert_eq!(t.shape(p), &[4]);
        assert!(t.value(p).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn cls_hand_set_scalar_chain() {
        // d=1: relu(0.7*2-0.4)=1.0, relu(1.0*-3+0.5)=0, logits=(0.2, 0.1)
        let mut store = ParamStore::new();
        let mut r = rng::stream(&[7]);
        let head = ClsHead::new(&mut store, &mut r, "cls", 1);
        let ids: Vec<_> = store.ids().collect();
        let vals: [&[Real]; 6] = [&[2.0], &[-0.4], &[-3.0], &[0.5], &[1.5, -0.7], &[0.2, 0.1]];
        for (id, v) in ids.iter().zip(vals) {
            store.value_mut(*id).data_mut().copy_from_slice(v);
        }
        let mut t = Tape::new();
        let f = TokenSeq::single(t.input(Tensor::new(&[1, 1], vec![0.7])), 1, 1);
        let logits = classification_head(&mut t, &store, &head, &f);
        assert!((t.value(logits).at(&[0, 0]) - 0.2).abs() < 1e-12);
        assert!((t.value(logits).at(&[0, 1]) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn reg_hand_set_scalar_chain() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(&[8]);
        let head = RegHead::new(&mut store, &mut r, "reg", 1);
        let ids: Vec<_> = store.ids().collect();
        // h1 = relu(0.5*2+0) = 1, h2 = relu(1*1+0.5) = 1.5
        let vals: [&[Real]; 6] = [
            &[2.0],
            &[0.0],
            &[1.0],
            &[0.5],
            &[1.0, -1.0, 0.0, 2.0],
            &[0.0, 0.0, 0.5, -1.0],
        ];
        for (id, v) in ids.iter().zip(vals) {
            store.value_mut(*id).data_mut().copy_from_slice(v);
        }
        let mut t = Tape::new();
        let f = TokenSeq::single(t.input(Tensor::new(&[1, 1], vec![0.5])), 1, 1);
        let (boxes, hidden) = regression_head(&mut t, &store, &head, &f);
        assert_eq!(t.value(hidden).item(), 1.5);
        let sig = |z: Real| 1.0 / (1.0 + (-z).exp());
        let expect = [sig(1.5), sig(-1.5), sig(0.5), sig(3.0 - 1.0)];
        for (k, &e) in expect.iter().enumerate() {
            assert!((t.value(boxes).at(&[0, k]) - e).abs() < 1e-12, "coord {k}");
        }
    }

    #[test]
    fn iou_hand_set_scalar_chain() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(&[9]);
        let head = IouHead::new(&mut store, &mut r, "iou", 1);
        let ids: Vec<_> = store.ids().collect();
        // joint = [0.3, 0.8]; h1 = relu(0.3*1 + 0.8*2 + 0.1) = 2.0
        // h2 = relu(2*0.5 - 0.5) = 0.5; out = sigmoid(0.5*4 - 1) = sigmoid(1)
        let vals: [&[Real]; 6] = [&[1.0, 2.0], &[0.1], &[0.5], &[-0.5], &[4.0], &[-1.0]];
        for (id, v) in ids.iter().zip(vals) {
            store.value_mut(*id).data_mut().copy_from_slice(v);
        }
        let mut t = Tape::new();
        let f = TokenSeq::single(t.input(Tensor::new(&[1, 1], vec![0.8])), 1, 1);
        let hidden = t.input(Tensor::new(&[1, 1], vec![0.3]));
        let p = iou_head(&mut t, &store, &head, hidden, &f);
        let expect = 1.0 / (1.0 + (-1.0 as Real).exp());
        assert!((t.value(p).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn outputs_bounded_for_random_weights() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(&[10]);
        let reg = RegHead::new(&mut store, &mut r, "reg", 8);
        let iou = IouHead::new(&mut store, &mut r, "iou", 8);
        let mut t = Tape::new();
        let f = tokens(&mut t, 12, 8, 11);
        let (boxes, hidden) = regression_head(&mut t, &store, &reg, &f);
        let p = iou_head(&mut t, &store, &iou, hidden, &f);
        assert!(t.value(boxes).data().iter().all(|&v| 0.0 < v && v < 1.0));
        assert!(t.value(p).data().iter().all(|&v| 0.0 < v && v < 1.0));
    }

    #[test]
    fn per_token_results_ignore_batch_company() {
        // heads act row-wise: a token's outputs do not depend on which other
        // tokens share the batch
        let mut store = ParamStore::new();
        let mut r = rng::stream(&[12]);
        let cls = ClsHead::new(&mut store, &mut r, "cls", 8);
        let reg = RegHead::new(&mut store, &mut r, "reg", 8);
        let mut t = Tape::new();
        let full = tokens(&mut t, 7, 8, 13);
        let row3 = t.gather_rows(full.var, &[3]);
        let single = TokenSeq::single(row3, 1, 1);
        let logits_full = classification_head(&mut t, &store, &cls, &full);
        let logits_one = classification_head(&mut t, &store, &cls, &single);
        for k in 0..2 {
            assert_eq!(t.value(logits_full).at(&[3, k]), t.value(logits_one).at(&[0, k]));
        }
        let (bf, _) = regression_head(&mut t, &store, &reg, &full);
        let (b1, _) = regression_head(&mut t, &store, &reg, &single);
        for k in 0..4 {
            assert_eq!(t.value(bf).at(&[3, k]), t.value(b1).at(&[0, k]));
        }
    }

    #[test]
    fn full_cover_marks_every_token_positive() {
        let gt = BBoxN::new(0.5, 0.5, 1.0, 1.0);
        let a = assign_samples(&gt, (32, 32));
        assert_eq!(a.positives.len(), 1024);
        assert!(a.labels.iter().all(|&l| l));
        assert!(!a.degenerate);
    }

    #[test]
    fn degenerate_boxes_are_all_negative_and_flagged() {
        for gt in [BBoxN::new(0.5, 0.5, 0.0, 0.3), BBoxN::new(0.5, 0.5, 0.3, -0.1)] {
            let a = assign_samples(&gt, (8, 8));
            assert!(a.degenerate);
            assert!(a.positives.is_empty());
            assert!(a.labels.iter().all(|&l| !l));
        }
    }

    #[test]
    fn boundary_centers_count_as_inside() {
        // centers on an even 4-grid sit at 0.125/0.375/0.625/0.875; a box
        // spanning [0.375, 0.625] catches the two middle centers inclusively
        let gt = BBoxN::new(0.5, 0.5, 0.25, 0.25);
        let a = assign_samples(&gt, (4, 4));
        assert_eq!(a.positives, vec![5, 6, 9, 10]);
    }

    #[test]
    fn tiny_box_between_centers_is_all_negative() {
        let gt = BBoxN::new(0.5, 0.5, 0.01, 0.01);
        let a = assign_samples(&gt, (4, 4));
        assert!(a.positives.is_empty());
        assert!(!a.degenerate);
    }

    #[test]
    fn matches_brute_force_on_random_boxes() {
        let mut r = rng::stream(&[rng::TAG_EVAL, 1000]);
        for _ in 0..1000 {
            let gt = BBoxN::new(
                rng::uniform(&mut r, 0.0, 1.0),
                rng::uniform(&mut r, 0.0, 1.0),
                rng::uniform(&mut r, -0.1, 0.9),
                rng::uniform(&mut r, -0.1, 0.9),
            );
            let (h, w) = (16, 16);
            let a = assign_samples(&gt, (h, w));
            let (x0, y0, x1, y1) = gt.corners();
            for i in 0..h {
                for j in 0..w {
                    let cx = (j as Real + 0.5) / w as Real;
                    let cy = (i as Real + 0.5) / h as Real;
                    let want = gt.w > 0.0
                        && gt.h > 0.0
                        && x0 <= cx
                        && cx <= x1
                        && y0 <= cy
                        && cy <= y1;
                    assert_eq!(a.labels[i * w + j], want, "gt {gt:?} token ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn offset_centers_shift_linearly() {
        let base = token_centers(4, 4);
        let shifted = offset_grid_centers(4, 4, 2.0, 3.0, 8, 8);
        for (k, &(bx, by)) in base.iter().enumerate() {
            let (sx, sy) = shifted[k];
            assert!((sx - (bx * 4.0 + 3.0) / 8.0).abs() < 1e-12);
            assert!((sy - (by * 4.0 + 2.0) / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_gradient_check() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(&[rng::TAG_INIT, 20]);
        let cls = ClsHead::new(&mut store, &mut r, "cls", 6);
        let reg = RegHead::new(&mut store, &mut r, "reg", 6);
        let iou = IouHead::new(&mut store, &mut r, "iou", 6);
        let fv = Tensor::uniform(&[5, 6], -1.0, 1.0, &mut r);
        let report = crate::tensor::check::check_gradients(&mut store, 4, |t, s| {
            let f = TokenSeq { var: t.input(fv.clone()), grids: vec![(1, 5)] };
            let logits = classification_head(t, s, &cls, &f);
            let (boxes, hidden) = regression_head(t, s, &reg, &f);
            let p = iou_head(t, s, &iou, hidden, &f);
            let a = t.sum(logits);
            let b = t.sum(boxes);
            let c = t.sum(p);
            let ab = t.add(a, b);
            t.add(ab, c)
        });
        assert!(report.ok(), "max rel err {}, failures: {:?}", report.max_rel_err, report.failures);
    }
}
