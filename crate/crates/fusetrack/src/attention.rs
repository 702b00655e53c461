//! Scaled dot-product attention, multi-head attention, and 2-D sine
//! positional encodings.

use crate::tensor::param::{Init, ParamId, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// A sequence of d-wide token vectors, stored rows-as-tokens (`[n×d]`),
/// with the spatial grids the tokens were flattened from. Concatenated
/// multi-template sequences carry one `(h, w)` entry per template.
#[derive(Clone, Debug)]
pub struct TokenSeq {
    pub var: Var,
    pub grids: Vec<(usize, usize)>,
}

impl TokenSeq {
    pub fn single(var: Var, h: usize, w: usize) -> Self {
        TokenSeq { var, grids: vec![(h, w)] }
    }

    pub fn token_count(&self) -> usize {
        self.grids.iter().map(|&(h, w)| h * w).sum()
    }
}

/// Deterministic 2-D sine positional encoding for one grid.
#[derive(Clone, Debug)]
pub struct PosEncoding {
    /// `[h·w × d]`, token order row-major over the grid.
    pub values: Tensor,
    pub grid: (usize, usize),
}

/// Sine/cosine encoding of grid positions: the first `d/2` channels encode
/// the row index, the last `d/2` the column index. Within each half, channel
/// pair `i` is `(sin, cos)` of `pos / 10000^(2i/(d/2))`. Positions are raw
/// grid indices.
pub fn sine_pos_encoding(h: usize, w: usize, d: usize) -> PosEncoding {
    assert!(d % 4 == 0, "encoding width {d} must be divisible by 4");
    let half = d / 2;
    let mut values = Tensor::zeros(&[h * w, d]);
    let freqs: Vec<Real> = (0..half / 2)
        .map(|i| (10000.0 as Real).powf(-((2 * i) as Real) / half as Real))
        .collect();
    for y in 0..h {
        for x in 0..w {
            let t = y * w + x;
            for (i, &f) in freqs.iter().enumerate() {
                let (ry, rx) = (y as Real * f, x as Real * f);
                values.set(&[t, 2 * i], ry.sin());
                values.set(&[t, 2 * i + 1], ry.cos());
                values.set(&[t, half + 2 * i], rx.sin());
                values.set(&[t, half + 2 * i + 1], rx.cos());
            }
        }
    }
    PosEncoding { values, grid: (h, w) }
}

/// Stacked per-grid encodings for a (possibly multi-grid) token sequence.
/// Every grid gets its own encoding, so duplicated templates see identical
/// position information.
pub fn encodings_for_grids(grids: &[(usize, usize)], d: usize) -> Tensor {
    let n: usize = grids.iter().map(|&(h, w)| h * w).sum();
    let mut out = Tensor::zeros(&[n, d]);
    let mut row = 0;
    for &(h, w) in grids {
        let enc = sine_pos_encoding(h, w, d);
        let src = enc.values.data();
        out.data_mut()[row * d..(row + h * w) * d].copy_from_slice(src);
        row += h * w;
    }
    out
}

/// Scaled dot-product attention. Returns the attended values and the
/// row-stochastic weight matrix.
pub fn sdpa(tape: &mut Tape, q: Var, k: Var, v: Var) -> (Var, Var) {
    let dk = {
        let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
        assert_eq!(sq[1], sk[1], "sdpa query/key width {sq:?} vs {sk:?}");
        assert_eq!(sk[0], sv[0], "sdpa key/value count");
        sq[1]
    };
    let kt = tape.transpose2d(k);
    let scores = tape.matmul(q, kt);
    let scaled = tape.scale(scores, 1.0 / (dk as Real).sqrt());
    let weights = tape.softmax(scaled);
    let out = tape.matmul(weights, v);
    (out, weights)
}

/// Multi-head attention parameters: packed per-head projections plus the
/// output projection, each with a bias.
#[derive(Clone, Debug)]
pub struct MhaParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub n_heads: usize,
    pub d_model: usize,
}

impl MhaParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl rand::Rng,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
    ) -> Self {
        assert!(d_model % n_heads == 0, "d_model {d_model} not divisible by {n_heads} heads");
        let p = |s: &str| format!("{prefix}.{s}");
        MhaParams {
            wq: store.add(&p("wq"), &[d_model, d_model], Init::Xavier, rng),
            bq: store.add(&p("bq"), &[d_model], Init::Zeros, rng),
            wk: store.add(&p("wk"), &[d_model, d_model], Init::Xavier, rng),
            bk: store.add(&p("bk"), &[d_model], Init::Zeros, rng),
            wv: store.add(&p("wv"), &[d_model, d_model], Init::Xavier, rng),
            bv: store.add(&p("bv"), &[d_model], Init::Zeros, rng),
            wo: store.add(&p("wo"), &[d_model, d_model], Init::Xavier, rng),
            bo: store.add(&p("bo"), &[d_model], Init::Zeros, rng),
            n_heads,
            d_model,
        }
    }

    pub fn head_width(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Multi-head attention output: projected tokens plus per-head weights.
pub struct MhaOut {
    pub out: Var,
    /// One `[n_q×n_k]` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

/// Multi-head attention over raw token matrices (`[n×d]` each).
pub fn mha(
    tape: &mut Tape,
    store: &ParamStore,
    p: &MhaParams,
    q_in: Var,
    k_in: Var,
    v_in: Var,
) -> MhaOut {
    let d = p.d_model;
    assert_eq!(tape.shape(q_in)[1], d, "mha query width");
    assert_eq!(tape.shape(k_in)[1], d, "mha key width");
    assert_eq!(tape.shape(v_in)[1], d, "mha value width");
    let dh = p.head_width();

    let (wq, bq) = (tape.param(store, p.wq), tape.param(store, p.bq));
    let (wk, bk) = (tape.param(store, p.wk), tape.param(store, p.bk));
    let (wv, bv) = (tape.param(store, p.wv), tape.param(store, p.bv));
    let (wo, bo) = (tape.param(store, p.wo), tape.param(store, p.bo));

    let q = tape.matmul(q_in, wq);
    let q = tape.add_row_bias(q, bq);
    let k = tape.matmul(k_in, wk);
    let k = tape.add_row_bias(k, bk);
    let v = tape.matmul(v_in, wv);
    let v = tape.add_row_bias(v, bv);

    let mut heads = Vec::with_capacity(p.n_heads);
    let mut weights = Vec::with_capacity(p.n_heads);
    for h in 0..p.n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.col_slice(q, lo, hi);
        let kh = tape.col_slice(k, lo, hi);
        let vh = tape.col_slice(v, lo, hi);
        let (oh, wh) = sdpa(tape, qh, kh, vh);
        heads.push(oh);
        weights.push(wh);
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat(1, &heads) };
    let out = tape.matmul(cat, wo);
    let out = tape.add_row_bias(out, bo);
    MhaOut { out, weights }
}

/// Multi-head attention over token sequences; the output inherits the query
/// side's grids.
pub fn mha_tokens(
    tape: &mut Tape,
    store: &ParamStore,
    p: &MhaParams,
    q_in: &TokenSeq,
    k_in: &TokenSeq,
    v_in: &TokenSeq,
) -> (TokenSeq, Vec<Var>) {
    let o = mha(tape, store, p, q_in.var, k_in.var, v_in.var);
    (TokenSeq { var: o.out, grids: q_in.grids.clone() }, o.weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng;

    fn tol() -> Real {
        if crate::tensor::REAL_IS_F64 {
            1e-12
        } else {
            1e-5
        }
    }

    #[test]
    fn encoding_zero_position_is_sin0_cos1() {
        let e = sine_pos_encoding(2, 2, 8);
        for i in 0..2 {
            assert_eq!(e.values.at(&[0, 2 * i]), 0.0, "sin channels at (0,0)");
            assert_eq!(e.values.at(&[0, 2 * i + 1]), 1.0, "cos channels at (0,0)");
            assert_eq!(e.values.at(&[0, 4 + 2 * i]), 0.0);
            assert_eq!(e.values.at(&[0, 4 + 2 * i + 1]), 1.0);
        }
    }

    #[test]
    fn encoding_row_one_first_sin_channel() {
        let e = sine_pos_encoding(2, 2, 8);
        // token (1,0): row half, pair 0, divisor 10000^0 = 1
        let got = e.values.at(&[2, 0]);
        assert!((got - (1.0 as Real).sin()).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn encoding_values_bounded() {
        let e = sine_pos_encoding(5, 7, 16);
        assert!(e.values.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    #[should_panic(expected = "divisible by 4")]
    fn encoding_width_must_be_divisible_by_4() {
        let _ = sine_pos_encoding(2, 2, 6);
    }

    #[test]
    fn sdpa_single_key_returns_value_row() {
        let mut t = Tape::new();
        let q = t.input(Tensor::new(&[3, 2], vec![5.0, -1.0, 0.0, 2.0, 7.0, 7.0]));
        let k = t.input(Tensor::new(&[1, 2], vec![0.3, 0.4]));
        let v = t.input(Tensor::new(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]));
        let (out, w) = sdpa(&mut t, q, k, v);
        for r in 0..3 {
            assert_eq!(t.value(w).at(&[r, 0]), 1.0);
            for c in 0..4 {
                assert_eq!(t.value(out).at(&[r, c]), (c + 1) as Real);
            }
        }
    }

    #[test]
    fn sdpa_identical_keys_average_values() {
        let mut t = Tape::new();
        let q = t.input(Tensor::new(&[1, 2], vec![0.7, -0.1]));
        let k = t.input(Tensor::new(&[3, 2], vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5]));
        let v = t.input(Tensor::new(&[3, 2], vec![1.0, 0.0, 2.0, 6.0, 3.0, 0.0]));
        let (out, _) = sdpa(&mut t, q, k, v);
        assert!((t.value(out).at(&[0, 0]) - 2.0).abs() < tol());
        assert!((t.value(out).at(&[0, 1]) - 2.0).abs() < tol());
    }

    #[test]
    fn sdpa_hand_case_two_tokens() {
        let mut t = Tape::new();
        let q = t.input(Tensor::new(&[2, 1], vec![0.0, 1.0]));
        let k = t.input(Tensor::new(&[2, 1], vec![0.0, 1.0]));
        let v = t.input(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let (out, w) = sdpa(&mut t, q, k, v);
        assert!((t.value(w).at(&[0, 0]) - 0.5).abs() < tol());
        assert!((t.value(w).at(&[0, 1]) - 0.5).abs() < tol());
        let e = (1.0 as Real).exp();
        let expect = e / (1.0 + e); // softmax([0, 1]) second entry
        assert!((t.value(w).at(&[1, 1]) - expect).abs() < 1e-9);
        assert!((t.value(out).at(&[1, 0]) - (1.0 - expect)).abs() < 1e-9);
        assert!((t.value(out).at(&[1, 1]) - expect).abs() < 1e-9);
    }

    fn identity_mha(store: &mut ParamStore, d: usize, n_heads: usize) -> MhaParams {
        let mut r = rng::stream(&[1]);
        let p = MhaParams::new(store, &mut r, "mha", d, n_heads);
        for w in [p.wq, p.wk, p.wv, p.wo] {
            let t = store.value_mut(w);
            t.data_mut().fill(0.0);
            for i in 0..d {
                t.set(&[i, i], 1.0);
            }
        }
        p
    }

    #[test]
    fn single_head_identity_projections_reduce_to_sdpa() {
        let mut store = ParamStore::new();
        let p = identity_mha(&mut store, 2, 1);
        let mut t = Tape::new();
        let mut r = rng::stream(&[5]);
        let q = t.input(Tensor::uniform(&[3, 2], -1.0, 1.0, &mut r));
        let k = t.input(Tensor::uniform(&[4, 2], -1.0, 1.0, &mut r));
        let v = t.input(Tensor::uniform(&[4, 2], -1.0, 1.0, &mut r));
        let o = mha(&mut t, &store, &p, q, k, v);
        let (direct, _) = sdpa(&mut t, q, k, v);
        assert!(t.value(o.out).max_abs_diff(t.value(direct)) < tol());
    }

    #[test]
    fn two_heads_match_independent_head_oracle() {
        let d = 4;
        let mut store = ParamStore::new();
        let mut r = rng::stream(&[7]);
        let p = MhaParams::new(&mut store, &mut r, "mha", d, 2);
        let mut t = Tape::new();
        let q = t.input(Tensor::uniform(&[3, d], -1.0, 1.0, &mut r));
        let k = t.input(Tensor::uniform(&[5, d], -1.0, 1.0, &mut r));
        let v = t.input(Tensor::uniform(&[5, d], -1.0, 1.0, &mut r));
        let o = mha(&mut t, &store, &p, q, k, v);

        // oracle: run each head by hand on the same tape, then project
        let (wq, bq) = (t.param(&store, p.wq), t.param(&store, p.bq));
        let (wk, bk) = (t.param(&store, p.wk), t.param(&store, p.bk));
        let (wv, bv) = (t.param(&store, p.wv), t.param(&store, p.bv));
        let (wo, bo) = (t.param(&store, p.wo), t.param(&store, p.bo));
        let qp = t.matmul(q, wq);
        let qp = t.add_row_bias(qp, bq);
        let kp = t.matmul(k, wk);
        let kp = t.add_row_bias(kp, bk);
        let vp = t.matmul(v, wv);
        let vp = t.add_row_bias(vp, bv);
        let mut parts = Vec::new();
        for h in 0..2 {
            let qh = t.col_slice(qp, h * 2, (h + 1) * 2);
            let kh = t.col_slice(kp, h * 2, (h + 1) * 2);
            let vh = t.col_slice(vp, h * 2, (h + 1) * 2);
            let (oh, _) = sdpa(&mut t, qh, kh, vh);
            parts.push(oh);
        }
        let cat = t.concat(1, &parts);
        let proj = t.matmul(cat, wo);
        let oracle = t.add_row_bias(proj, bo);
        assert!(t.value(o.out).max_abs_diff(t.value(oracle)) < tol());
    }

    #[test]
    fn duplicating_key_value_tokens_changes_nothing() {
        let d = 8;
        let mut store = ParamStore::new();
        let mut r = rng::stream(&[11]);
        let p = MhaParams::new(&mut store, &mut r, "mha", d, 2);
        let kv = Tensor::uniform(&[6, d], -1.0, 1.0, &mut r);
        let qv = Tensor::uniform(&[3, d], -1.0, 1.0, &mut r);
        let mut t = Tape::new();
        let q = t.input(qv);
        let k1 = t.input(kv.clone());
        let o1 = mha(&mut t, &store, &p, q, k1, k1);
        // three copies of the same kv set
        let mut trip = kv.data().to_vec();
        trip.extend_from_slice(kv.data());
        trip.extend_from_slice(kv.data());
        let k3 = t.input(Tensor::new(&[18, d], trip));
        let o3 = mha(&mut t, &store, &p, q, k3, k3);
        assert!(t.value(o1.out).max_abs_diff(t.value(o3.out)) < 1e-9);
    }

    #[test]
    fn attention_weights_are_row_stochastic() {
        let d = 8;
        let mut store = ParamStore::new();
        let mut r = rng::stream(&[13]);
        let p = MhaParams::new(&mut store, &mut r, "mha", d, 4);
        let mut t = Tape::new();
        let q = t.input(Tensor::uniform(&[5, d], -2.0, 2.0, &mut r));
        let k = t.input(Tensor::uniform(&[7, d], -2.0, 2.0, &mut r));
        let o = mha(&mut t, &store, &p, q, k, k);
        for w in &o.weights {
            let wt = t.value(*w);
            for row in 0..wt.shape()[0] {
                let s: Real = (0..wt.shape()[1]).map(|c| wt.at(&[row, c])).sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!((0..wt.shape()[1]).all(|c| wt.at(&[row, c]) >= 0.0));
            }
        }
    }

    #[test]
    fn permuting_kv_tokens_leaves_output_unchanged() {
        let d = 4;
        let mut store = ParamStore::new();
        let mut r = rng::stream(&[17]);
        let p = MhaParams::new(&mut store, &mut r, "mha", d, 2);
        let kv = Tensor::uniform(&[5, d], -1.0, 1.0, &mut r);
        let perm = [3usize, 0, 4, 2, 1];
        let mut kvp = Tensor::zeros(&[5, d]);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..d {
                kvp.set(&[dst, c], kv.at(&[src, c]));
            }
        }
        let mut t = Tape::new();
        let q = t.input(Tensor::uniform(&[2, d], -1.0, 1.0, &mut r));
        let k = t.input(kv);
        let kp = t.input(kvp);
        let a = mha(&mut t, &store, &p, q, k, k);
        let b = mha(&mut t, &store, &p, q, kp, kp);
        assert!(t.value(a.out).max_abs_diff(t.value(b.out)) < 1e-9);
    }

    #[test]
    fn mha_gradients_match_finite_differences() {
        let d = 4;
        let mut store = ParamStore::new();
        let mut r = rng::stream(&[19]);
        let p = MhaParams::new(&mut store, &mut r, "mha", d, 2);
        let qv = Tensor::uniform(&[2, d], -1.0, 1.0, &mut r);
        let kv = Tensor::uniform(&[3, d], -1.0, 1.0, &mut r);
        let report = crate::tensor::check::check_gradients(&mut store, usize::MAX, |t, s| {
            let q = t.input(qv.clone());
            let k = t.input(kv.clone());
            let o = mha(t, s, &p, q, k, k);
            t.sum(o.out)
        });
        assert!(report.ok(), "max rel err {}, failures {:?}", report.max_rel_err, report.failures);
    }
}
