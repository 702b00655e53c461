//! Define-by-run differentiation tape.
//!
//! Forward values are computed eagerly as operations are recorded; the tape
//! is rebuilt on every forward pass. [`Var`] is a copyable handle into the
//! tape. Inputs always precede the operations that consume them, so backward
//! is a single reverse sweep.
//!
//! A tape and its tensors are confined to one thread; parameter snapshots in
//! a [`ParamStore`] may be shared read-only across tapes on other threads.

use super::math::{self, ConvSpec};
use super::param::{ParamId, ParamStore};
use super::{Real, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, Real),
    AddScalar(Var),
    PowConst(Var, Real),
    Log(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Min(Var, Var),
    Max(Var, Var),
    ClampConst(Var, Real, Real),
    Matmul(Var, Var),
    AddRowBias(Var, Var),
    Softmax(Var),
    LayerNorm(Var, Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    BilinearResize(Var),
    DwXcorr(Var, Var),
    Concat { axis: usize, parts: Vec<Var> },
    Reshape(Var),
    Transpose2d(Var),
    ColSlice { x: Var, lo: usize, hi: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

struct Node {
    op: Op,
    rg: bool,
}

/// Gradients of one backward sweep, indexed by tape node.
pub struct TapeGrads {
    by_node: Vec<Option<Tensor>>,
}

impl TapeGrads {
    /// Gradient of the sweep's root w.r.t. `v`, if `v` was reached.
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<Tensor>,
    param_memo: Vec<Option<Var>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.vals[v.0].shape()
    }

    fn push(&mut self, op: Op, rg: bool, val: Tensor) -> Var {
        self.nodes.push(Node { op, rg });
        self.vals.push(val);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].rg
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, val: Tensor) -> Var {
        self.push(Op::Input, false, val)
    }

    pub fn scalar(&mut self, v: Real) -> Var {
        self.input(Tensor::scalar(v))
    }

    /// Parameter leaf. Trainable parameters participate in backward; frozen
    /// ones enter as constants. Repeated calls for the same id reuse the node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_memo.len() < store.len() {
            self.param_memo.resize(store.len(), None);
        }
        if let Some(v) = self.param_memo[id.0] {
            return v;
        }
        let trainable = store.trainable(id);
        let v = if trainable {
            self.push(Op::Param(id), true, store.value(id).clone())
        } else {
            self.push(Op::Input, false, store.value(id).clone())
        };
        self.param_memo[id.0] = Some(v);
        v
    }

    // ── elementwise ──

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let val = self.zip(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), self.rg(a) || self.rg(b), val)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let val = self.zip(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), self.rg(a) || self.rg(b), val)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let val = self.zip(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), self.rg(a) || self.rg(b), val)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let val = self.zip(a, b, |x, y| x / y);
        self.push(Op::Div(a, b), self.rg(a) || self.rg(b), val)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].map(|x| -x);
        self.push(Op::Neg(a), self.rg(a), val)
    }

    pub fn scale(&mut self, a: Var, c: Real) -> Var {
        let val = self.vals[a.0].map(|x| c * x);
        self.push(Op::Scale(a, c), self.rg(a), val)
    }

    pub fn add_scalar(&mut self, a: Var, c: Real) -> Var {
        let val = self.vals[a.0].map(|x| x + c);
        self.push(Op::AddScalar(a), self.rg(a), val)
    }

    pub fn pow_const(&mut self, a: Var, p: Real) -> Var {
        let val = self.vals[a.0].map(|x| x.powf(p));
        self.push(Op::PowConst(a, p), self.rg(a), val)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].map(Real::ln);
        self.push(Op::Log(a), self.rg(a), val)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].map(|x| x.max(0.0));
        self.push(Op::Relu(a), self.rg(a), val)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), self.rg(a), val)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].map(Real::abs);
        self.push(Op::Abs(a), self.rg(a), val)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "minimum");
        let val = self.zip(a, b, Real::min);
        self.push(Op::Min(a, b), self.rg(a) || self.rg(b), val)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "maximum");
        let val = self.zip(a, b, Real::max);
        self.push(Op::Max(a, b), self.rg(a) || self.rg(b), val)
    }

    pub fn clamp(&mut self, a: Var, lo: Real, hi: Real) -> Var {
        let val = self.vals[a.0].map(|x| x.clamp(lo, hi));
        self.push(Op::ClampConst(a, lo, hi), self.rg(a), val)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(Real, Real) -> Real) -> Tensor {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        Tensor::new(
            ta.shape(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    // ── linear algebra ──

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.len(), 2, "matmul lhs rank");
        assert_eq!(sb.len(), 2, "matmul rhs rank");
        assert_eq!(sa[1], sb[0], "matmul inner extents {sa:?} vs {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        math::matmul(self.vals[a.0].data(), self.vals[b.0].data(), m, k, n, out.data_mut());
        self.push(Op::Matmul(a, b), self.rg(a) || self.rg(b), out)
    }

    /// `[m×n] + [n]`, adding the bias to every row.
    pub fn add_row_bias(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.len(), 2, "add_row_bias lhs rank");
        assert_eq!(sb, &[sa[1]], "add_row_bias bias shape");
        let (m, n) = (sa[0], sa[1]);
        let mut out = self.vals[a.0].clone();
        let bias = self.vals[b.0].data().to_vec();
        for i in 0..m {
            for (o, &bv) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        self.push(Op::AddRowBias(a, b), self.rg(a) || self.rg(b), out)
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax(&mut self, a: Var) -> Var {
        let sa = self.shape(a);
        assert_eq!(sa.len(), 2, "softmax rank");
        let (m, n) = (sa[0], sa[1]);
        let mut out = Tensor::zeros(&[m, n]);
        math::softmax_rows(self.vals[a.0].data(), m, n, out.data_mut());
        self.push(Op::Softmax(a), self.rg(a), out)
    }

    /// Row-wise layer norm of a 2-D tensor with per-column gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let sx = self.shape(x);
        assert_eq!(sx.len(), 2, "layer_norm rank");
        let (m, n) = (sx[0], sx[1]);
        assert_eq!(self.shape(gain), &[n], "layer_norm gain shape");
        assert_eq!(self.shape(bias), &[n], "layer_norm bias shape");
        let mut out = Tensor::zeros(&[m, n]);
        math::layer_norm_rows(
            self.vals[x.0].data(),
            self.vals[gain.0].data(),
            self.vals[bias.0].data(),
            m,
            n,
            out.data_mut(),
        );
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(Op::LayerNorm(x, gain, bias), rg, out)
    }

    // ── spatial ──

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(sx.len(), 3, "conv2d input rank (c×h×w)");
        assert_eq!(sw.len(), 4, "conv2d kernel rank (cout×cin×kh×kw)");
        assert_eq!(sx[0], sw[1], "conv2d channel agreement {sx:?} vs {sw:?}");
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let oh = spec.out_extent(h, kh).expect("conv2d: nonpositive output height");
        let ow = spec.out_extent(wd, kw).expect("conv2d: nonpositive output width");
        if let Some(bv) = b {
            assert_eq!(self.shape(bv), &[cout], "conv2d bias shape");
        }
        let mut out = Tensor::zeros(&[cout, oh, ow]);
        math::conv2d_fwd(
            self.vals[x.0].data(),
            self.vals[w.0].data(),
            b.map(|bv| self.vals[bv.0].data()),
            cin,
            h,
            wd,
            cout,
            kh,
            kw,
            spec,
            out.data_mut(),
        );
        let rg = self.rg(x) || self.rg(w) || b.map_or(false, |bv| self.rg(bv));
        self.push(Op::Conv2d { x, w, b, spec }, rg, out)
    }

    pub fn bilinear_resize(&mut self, x: Var, h2: usize, w2: usize) -> Var {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 3, "bilinear_resize rank (c×h×w)");
        assert!(h2 >= 1 && w2 >= 1, "bilinear_resize target extents");
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let mut out = Tensor::zeros(&[c, h2, w2]);
        math::bilinear_resize_fwd(self.vals[x.0].data(), c, h, w, h2, w2, out.data_mut());
        self.push(Op::BilinearResize(x), self.rg(x), out)
    }

    /// Per-channel valid cross-correlation of `x` with template `z`.
    pub fn depthwise_xcorr(&mut self, x: Var, z: Var) -> Var {
        let (sx, sz) = (self.shape(x).to_vec(), self.shape(z).to_vec());
        assert_eq!(sx.len(), 3, "depthwise_xcorr search rank");
        assert_eq!(sz.len(), 3, "depthwise_xcorr template rank");
        assert_eq!(sx[0], sz[0], "depthwise_xcorr channels");
        assert!(
            sz[1] <= sx[1] && sz[2] <= sx[2],
            "depthwise_xcorr: template {sz:?} larger than search {sx:?}"
        );
        let (c, hx, wx, hz, wz) = (sx[0], sx[1], sx[2], sz[1], sz[2]);
        let mut out = Tensor::zeros(&[c, hx - hz + 1, wx - wz + 1]);
        math::dwxcorr_fwd(self.vals[x.0].data(), self.vals[z.0].data(), c, hx, wx, hz, wz, out.data_mut());
        self.push(Op::DwXcorr(x, z), self.rg(x) || self.rg(z), out)
    }

    // ── structural ──

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        assert!(axis < first.len(), "concat axis {axis} for rank {}", first.len());
        let mut axis_total = 0;
        for &p in parts {
            let sp = self.shape(p);
            assert_eq!(sp.len(), first.len(), "concat rank mismatch");
            for (ax, (&a, &b)) in sp.iter().zip(&first).enumerate() {
                if ax != axis {
                    assert_eq!(a, b, "concat extent mismatch off-axis");
                }
            }
            axis_total += sp[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; shape.iter().product()];
        let row = axis_total * inner;
        let mut off = 0;
        for &p in parts {
            let pa = self.shape(p)[axis];
            let src = self.vals[p.0].data();
            for o in 0..outer {
                let dst = &mut data[o * row + off..o * row + off + pa * inner];
                dst.copy_from_slice(&src[o * pa * inner..(o + 1) * pa * inner]);
            }
            off += pa * inner;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::Concat { axis, parts: parts.to_vec() }, rg, Tensor::new(&shape, data))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let val = self.vals[a.0].clone().reshaped(shape);
        self.push(Op::Reshape(a), self.rg(a), val)
    }

    pub fn transpose2d(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].t2();
        self.push(Op::Transpose2d(a), self.rg(a), val)
    }

    /// Columns `[lo, hi)` of a 2-D tensor.
    pub fn col_slice(&mut self, x: Var, lo: usize, hi: usize) -> Var {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 2, "col_slice rank");
        assert!(lo < hi && hi <= sx[1], "col_slice range {lo}..{hi} of {sx:?}");
        let (m, n) = (sx[0], sx[1]);
        let mut data = Vec::with_capacity(m * (hi - lo));
        let src = self.vals[x.0].data();
        for i in 0..m {
            data.extend_from_slice(&src[i * n + lo..i * n + hi]);
        }
        self.push(Op::ColSlice { x, lo, hi }, self.rg(x), Tensor::new(&[m, hi - lo], data))
    }

    /// First-axis gather; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let sx = self.shape(x).to_vec();
        assert!(!sx.is_empty() && !idx.is_empty(), "gather_rows arguments");
        let inner: usize = sx[1..].iter().product();
        let src = self.vals[x.0].data();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &r in idx {
            assert!(r < sx[0], "gather_rows index {r} out of {}", sx[0]);
            data.extend_from_slice(&src[r * inner..(r + 1) * inner]);
        }
        let mut shape = sx.clone();
        shape[0] = idx.len();
        self.push(
            Op::GatherRows { x, idx: idx.to_vec() },
            self.rg(x),
            Tensor::new(&shape, data),
        )
    }

    // ── reductions ──

    pub fn sum(&mut self, a: Var) -> Var {
        let s: Real = self.vals[a.0].data().iter().sum();
        self.push(Op::Sum(a), self.rg(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.vals[a.0].numel() as Real;
        let s: Real = self.vals[a.0].data().iter().sum();
        self.push(Op::Mean(a), self.rg(a), Tensor::scalar(s / n))
    }

    // ── backward ──

    /// Reverse sweep from a scalar root. The root's own gradient is 1.
    pub fn backward(&self, root: Var) -> TapeGrads {
        assert_eq!(
            self.vals[root.0].numel(),
            1,
            "backward root must be scalar, got {:?}",
            self.vals[root.0].shape()
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].rg {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let g = upper[0].as_ref().unwrap().clone();
            self.backprop(i, &g, lower);
        }
        TapeGrads { by_node: grads }
    }

    /// Gradients for every trainable parameter leaf on this tape, in node order.
    pub fn param_grads<'a>(
        &'a self,
        grads: &'a TapeGrads,
    ) -> impl Iterator<Item = (ParamId, &'a Tensor)> + 'a {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| match n.op {
            Op::Param(id) => grads.by_node[i].as_ref().map(|g| (id, g)),
            _ => None,
        })
    }

    fn acc_into(
        &self,
        slot: &mut Option<Tensor>,
        shape: &[usize],
        f: impl FnOnce(&mut [Real]),
    ) {
        if slot.is_none() {
            *slot = Some(Tensor::zeros(shape));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn acc_elems(&self, grads: &mut [Option<Tensor>], v: Var, contrib: impl Fn(usize) -> Real) {
        if !self.nodes[v.0].rg {
            return;
        }
        let shape = self.vals[v.0].shape().to_vec();
        self.acc_into(&mut grads[v.0], &shape, |d| {
            for (i, o) in d.iter_mut().enumerate() {
                *o += contrib(i);
            }
        });
    }

    #[allow(clippy::too_many_lines)]
    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc_elems(grads, *a, |j| gd[j]);
                self.acc_elems(grads, *b, |j| gd[j]);
            }
            Op::Sub(a, b) => {
                self.acc_elems(grads, *a, |j| gd[j]);
                self.acc_elems(grads, *b, |j| -gd[j]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.vals[a.0].data(), self.vals[b.0].data());
                self.acc_elems(grads, *a, |j| gd[j] * vb[j]);
                self.acc_elems(grads, *b, |j| gd[j] * va[j]);
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.vals[a.0].data(), self.vals[b.0].data());
                self.acc_elems(grads, *a, |j| gd[j] / vb[j]);
                self.acc_elems(grads, *b, |j| -gd[j] * va[j] / (vb[j] * vb[j]));
            }
            Op::Neg(a) => self.acc_elems(grads, *a, |j| -gd[j]),
            Op::Scale(a, c) => {
                let c = *c;
                self.acc_elems(grads, *a, |j| c * gd[j]);
            }
            Op::AddScalar(a) => self.acc_elems(grads, *a, |j| gd[j]),
            Op::PowConst(a, p) => {
                let p = *p;
                let va = self.vals[a.0].data();
                self.acc_elems(grads, *a, |j| gd[j] * p * va[j].powf(p - 1.0));
            }
            Op::Log(a) => {
                let va = self.vals[a.0].data();
                self.acc_elems(grads, *a, |j| gd[j] / va[j]);
            }
            Op::Relu(a) => {
                let va = self.vals[a.0].data();
                self.acc_elems(grads, *a, |j| if va[j] > 0.0 { gd[j] } else { 0.0 });
            }
            Op::Sigmoid(a) => {
                let y = self.vals[i].data();
                self.acc_elems(grads, *a, |j| gd[j] * y[j] * (1.0 - y[j]));
            }
            Op::Abs(a) => {
                let va = self.vals[a.0].data();
                self.acc_elems(grads, *a, |j| {
                    if va[j] == 0.0 {
                        0.0
                    } else {
                        gd[j] * va[j].signum()
                    }
                });
            }
            Op::Min(a, b) => {
                let (va, vb) = (self.vals[a.0].data(), self.vals[b.0].data());
                self.acc_elems(grads, *a, |j| if va[j] <= vb[j] { gd[j] } else { 0.0 });
                self.acc_elems(grads, *b, |j| if va[j] > vb[j] { gd[j] } else { 0.0 });
            }
            Op::Max(a, b) => {
                let (va, vb) = (self.vals[a.0].data(), self.vals[b.0].data());
                self.acc_elems(grads, *a, |j| if va[j] >= vb[j] { gd[j] } else { 0.0 });
                self.acc_elems(grads, *b, |j| if va[j] < vb[j] { gd[j] } else { 0.0 });
            }
            Op::ClampConst(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let va = self.vals[a.0].data();
                self.acc_elems(grads, *a, |j| {
                    if va[j] >= lo && va[j] <= hi {
                        gd[j]
                    } else {
                        0.0
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.vals[a.0].shape(), self.vals[b.0].shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].rg {
                    let vb = self.vals[b.0].data();
                    self.acc_into(&mut grads[a.0], &[m, k], |d| {
                        math::matmul_abt_acc(gd, vb, m, n, k, d);
                    });
                }
                if self.nodes[b.0].rg {
                    let va = self.vals[a.0].data();
                    self.acc_into(&mut grads[b.0], &[k, n], |d| {
                        math::matmul_atb_acc(va, gd, m, k, n, d);
                    });
                }
            }
            Op::AddRowBias(a, b) => {
                self.acc_elems(grads, *a, |j| gd[j]);
                if self.nodes[b.0].rg {
                    let n = self.vals[b.0].numel();
                    let m = self.vals[a.0].shape()[0];
                    self.acc_into(&mut grads[b.0], &[n], |d| {
                        for r in 0..m {
                            for (o, &gv) in d.iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                                *o += gv;
                            }
                        }
                    });
                }
            }
            Op::Softmax(a) => {
                let s = self.vals[i].shape();
                let (m, n) = (s[0], s[1]);
                let y = self.vals[i].data();
                if self.nodes[a.0].rg {
                    self.acc_into(&mut grads[a.0], &[m, n], |d| {
                        math::softmax_rows_bwd(y, gd, m, n, d);
                    });
                }
            }
            Op::LayerNorm(x, gain, bias) => {
                let s = self.vals[x.0].shape().to_vec();
                let (m, n) = (s[0], s[1]);
                let vx = self.vals[x.0].data();
                let vg = self.vals[gain.0].data();
                // Split borrows: compute into fresh buffers, then accumulate.
                let need_x = self.nodes[x.0].rg;
                let need_g = self.nodes[gain.0].rg;
                let need_b = self.nodes[bias.0].rg;
                let mut dx = if need_x { Some(vec![0.0; m * n]) } else { None };
                let mut dg = if need_g { Some(vec![0.0; n]) } else { None };
                let mut db = if need_b { Some(vec![0.0; n]) } else { None };
                math::layer_norm_rows_bwd(
                    vx,
                    vg,
                    gd,
                    m,
                    n,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.acc_into(&mut grads[x.0], &[m, n], |d| {
                        for (o, v) in d.iter_mut().zip(&dx) {
                            *o += v;
                        }
                    });
                }
                if let Some(dg) = dg {
                    self.acc_into(&mut grads[gain.0], &[n], |d| {
                        for (o, v) in d.iter_mut().zip(&dg) {
                            *o += v;
                        }
                    });
                }
                if let Some(db) = db {
                    self.acc_into(&mut grads[bias.0], &[n], |d| {
                        for (o, v) in d.iter_mut().zip(&db) {
                            *o += v;
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                let sx = self.vals[x.0].shape().to_vec();
                let sw = self.vals[w.0].shape().to_vec();
                let (cin, h, wd) = (sx[0], sx[1], sx[2]);
                let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
                let so = self.vals[i].shape().to_vec();
                if self.nodes[x.0].rg {
                    let vw = self.vals[w.0].data();
                    self.acc_into(&mut grads[x.0], &sx, |d| {
                        math::conv2d_bwd_x(gd, vw, cin, h, wd, cout, kh, kw, *spec, d);
                    });
                }
                if self.nodes[w.0].rg {
                    let vx = self.vals[x.0].data();
                    self.acc_into(&mut grads[w.0], &sw, |d| {
                        math::conv2d_bwd_w(gd, vx, cin, h, wd, cout, kh, kw, *spec, d);
                    });
                }
                if let Some(bv) = b {
                    if self.nodes[bv.0].rg {
                        self.acc_into(&mut grads[bv.0], &[cout], |d| {
                            math::conv2d_bwd_b(gd, cout, so[1], so[2], d);
                        });
                    }
                }
            }
            Op::BilinearResize(x) => {
                let sx = self.vals[x.0].shape().to_vec();
                let so = self.vals[i].shape().to_vec();
                if self.nodes[x.0].rg {
                    self.acc_into(&mut grads[x.0], &sx, |d| {
                        math::bilinear_resize_bwd(gd, sx[0], sx[1], sx[2], so[1], so[2], d);
                    });
                }
            }
            Op::DwXcorr(x, z) => {
                let sx = self.vals[x.0].shape().to_vec();
                let sz = self.vals[z.0].shape().to_vec();
                let (c, hx, wx, hz, wz) = (sx[0], sx[1], sx[2], sz[1], sz[2]);
                let vx = self.vals[x.0].data();
                let vz = self.vals[z.0].data();
                let need_x = self.nodes[x.0].rg;
                let need_z = self.nodes[z.0].rg;
                let mut dx = if need_x { Some(vec![0.0; vx.len()]) } else { None };
                let mut dz = if need_z { Some(vec![0.0; vz.len()]) } else { None };
                math::dwxcorr_bwd(gd, vx, vz, c, hx, wx, hz, wz, dx.as_deref_mut(), dz.as_deref_mut());
                if let Some(dx) = dx {
                    self.acc_into(&mut grads[x.0], &sx, |d| {
                        for (o, v) in d.iter_mut().zip(&dx) {
                            *o += v;
                        }
                    });
                }
                if let Some(dz) = dz {
                    self.acc_into(&mut grads[z.0], &sz, |d| {
                        for (o, v) in d.iter_mut().zip(&dz) {
                            *o += v;
                        }
                    });
                }
            }
            Op::Concat { axis, parts } => {
                let so = self.vals[i].shape().to_vec();
                let outer: usize = so[..*axis].iter().product();
                let inner: usize = so[*axis + 1..].iter().product();
                let row = so[*axis] * inner;
                let mut off = 0;
                for &p in parts {
                    let pa = self.vals[p.0].shape()[*axis];
                    if self.nodes[p.0].rg {
                        let shape = self.vals[p.0].shape().to_vec();
                        self.acc_into(&mut grads[p.0], &shape, |d| {
                            for o in 0..outer {
                                let src = &gd[o * row + off..o * row + off + pa * inner];
                                for (dst, &v) in
                                    d[o * pa * inner..(o + 1) * pa * inner].iter_mut().zip(src)
                                {
                                    *dst += v;
                                }
                            }
                        });
                    }
                    off += pa * inner;
                }
            }
            Op::Reshape(a) => self.acc_elems(grads, *a, |j| gd[j]),
            Op::Transpose2d(a) => {
                // input [m_i×n_i], output [n_i×m_i]: d_in[r,c] += g[c,r]
                let si = self.vals[a.0].shape();
                let (mi, ni) = (si[0], si[1]);
                self.acc_elems(grads, *a, |flat| {
                    let (r, c) = (flat / ni, flat % ni);
                    gd[c * mi + r]
                });
            }
            Op::ColSlice { x, lo, hi } => {
                if self.nodes[x.0].rg {
                    let sx = self.vals[x.0].shape().to_vec();
                    let (m, n) = (sx[0], sx[1]);
                    let w = hi - lo;
                    self.acc_into(&mut grads[x.0], &sx, |d| {
                        for r in 0..m {
                            for c in 0..w {
                                d[r * n + lo + c] += gd[r * w + c];
                            }
                        }
                    });
                }
            }
            Op::GatherRows { x, idx } => {
                if self.nodes[x.0].rg {
                    let sx = self.vals[x.0].shape().to_vec();
                    let inner: usize = sx[1..].iter().product();
                    self.acc_into(&mut grads[x.0], &sx, |d| {
                        for (r, &src_row) in idx.iter().enumerate() {
                            for c in 0..inner {
                                d[src_row * inner + c] += gd[r * inner + c];
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                let gv = gd[0];
                self.acc_elems(grads, *a, |_| gv);
            }
            Op::Mean(a) => {
                let gv = gd[0] / self.vals[a.0].numel() as Real;
                self.acc_elems(grads, *a, |_| gv);
            }
        }
    }
}
