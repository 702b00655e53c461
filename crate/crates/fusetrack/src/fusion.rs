//! Feature fusion: residual self-attention (ECA) and cross-attention (CFA)
//! blocks, the N-times-repeated fusion layer, input channel reduction, and
//! the depthwise cross-correlation baseline.

use crate::attention::{encodings_for_grids, mha, MhaParams, TokenSeq};
use crate::tensor::param::{Init, ParamId, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Layer-norm gain/bias pair.
#[derive(Clone, Debug)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    fn new(store: &mut ParamStore, rng: &mut impl rand::Rng, prefix: &str, d: usize) -> Self {
        NormParams {
            gain: store.add(&format!("{prefix}.gain"), &[d], Init::Ones, rng),
            bias: store.add(&format!("{prefix}.bias"), &[d], Init::Zeros, rng),
        }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Two-layer feed-forward block with an inner ReLU.
#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl rand::Rng,
        prefix: &str,
        d: usize,
        d_ffn: usize,
    ) -> Self {
        FfnParams {
            w1: store.add(&format!("{prefix}.w1"), &[d, d_ffn], Init::Xavier, rng),
            b1: store.add(&format!("{prefix}.b1"), &[d_ffn], Init::Zeros, rng),
            w2: store.add(&format!("{prefix}.w2"), &[d_ffn, d], Init::Xavier, rng),
            b2: store.add(&format!("{prefix}.b2"), &[d], Init::Zeros, rng),
        }
    }
}

/// `max(0, xW₁+b₁)W₂+b₂` over token rows.
pub fn ffn_forward(tape: &mut Tape, store: &ParamStore, ffn: &FfnParams, x: Var) -> Var {
    let w1 = tape.param(store, ffn.w1);
    let b1 = tape.param(store, ffn.b1);
    let w2 = tape.param(store, ffn.w2);
    let b2 = tape.param(store, ffn.b2);
    let h = tape.matmul(x, w1);
    let h = tape.add_row_bias(h, b1);
    let h = tape.relu(h);
    let o = tape.matmul(h, w2);
    tape.add_row_bias(o, b2)
}

/// Residual self-attention block: `X + MultiHead(X+P, X+P, X)`.
#[derive(Clone, Debug)]
pub struct EcaLayer {
    pub mha: MhaParams,
    pub norm: Option<NormParams>,
}

impl EcaLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl rand::Rng,
        prefix: &str,
        d: usize,
        n_heads: usize,
        norms: bool,
    ) -> Self {
        EcaLayer {
            mha: MhaParams::new(store, rng, &format!("{prefix}.mha"), d, n_heads),
            norm: norms.then(|| NormParams::new(store, rng, &format!("{prefix}.norm"), d)),
        }
    }
}

/// ECA forward. `enc` is the stacked positional encoding for `x`'s grids;
/// encodings join the query/key inputs only, never the values.
pub fn eca_forward(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &EcaLayer,
    x: &TokenSeq,
    enc: &Tensor,
) -> (TokenSeq, Vec<Var>) {
    assert_eq!(
        enc.shape(),
        tape.shape(x.var),
        "encoding/token shape mismatch in eca_forward"
    );
    let p = tape.input(enc.clone());
    let xp = tape.add(x.var, p);
    let o = mha(tape, store, &layer.mha, xp, xp, x.var);
    let res = tape.add(x.var, o.out);
    let out = match &layer.norm {
        Some(n) => n.apply(tape, store, res),
        None => res,
    };
    (TokenSeq { var: out, grids: x.grids.clone() }, o.weights)
}

/// Residual cross-attention block with FFN:
/// `X̃ = X_q + MultiHead(X_q+P_q, X_kv+P_kv, X_kv)`, `out = X̃ + FFN(X̃)`.
#[derive(Clone, Debug)]
pub struct CfaLayer {
    pub mha: MhaParams,
    pub ffn: FfnParams,
    pub norm1: Option<NormParams>,
    pub norm2: Option<NormParams>,
}

impl CfaLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl rand::Rng,
        prefix: &str,
        d: usize,
        n_heads: usize,
        d_ffn: usize,
        norms: bool,
    ) -> Self {
        CfaLayer {
            mha: MhaParams::new(store, rng, &format!("{prefix}.mha"), d, n_heads),
            ffn: FfnParams::new(store, rng, &format!("{prefix}.ffn"), d, d_ffn),
            norm1: norms.then(|| NormParams::new(store, rng, &format!("{prefix}.norm1"), d)),
            norm2: norms.then(|| NormParams::new(store, rng, &format!("{prefix}.norm2"), d)),
        }
    }
}

/// CFA forward; returns the fused query-side tokens and per-head weights.
pub fn cfa_forward(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &CfaLayer,
    xq: &TokenSeq,
    pq: &Tensor,
    xkv: &TokenSeq,
    pkv: &Tensor,
) -> (TokenSeq, Vec<Var>) {
    assert_eq!(pq.shape(), tape.shape(xq.var), "query encoding shape in cfa_forward");
    assert_eq!(pkv.shape(), tape.shape(xkv.var), "kv encoding shape in cfa_forward");
    let pqv = tape.input(pq.clone());
    let pkvv = tape.input(pkv.clone());
    let q = tape.add(xq.var, pqv);
    let k = tape.add(xkv.var, pkvv);
    let o = mha(tape, store, &layer.mha, q, k, xkv.var);
    let mid = tape.add(xq.var, o.out);
    let mid = match &layer.norm1 {
        Some(n) => n.apply(tape, store, mid),
        None => mid,
    };
    let f = ffn_forward(tape, store, &layer.ffn, mid);
    let out = tape.add(mid, f);
    let out = match &layer.norm2 {
        Some(n) => n.apply(tape, store, out),
        None => out,
    };
    (TokenSeq { var: out, grids: xq.grids.clone() }, o.weights)
}

/// One fusion layer: two ECAs (one per branch) and two CFAs that consume the
/// ECA outputs of the same layer.
#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub eca_z: EcaLayer,
    pub eca_x: EcaLayer,
    pub cfa_z: CfaLayer,
    pub cfa_x: CfaLayer,
}

/// 1×1 convolution parameters for channel reduction.
#[derive(Clone, Debug)]
pub struct Reduce1x1 {
    pub w: ParamId,
    pub b: ParamId,
}

impl Reduce1x1 {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl rand::Rng,
        prefix: &str,
        c_in: usize,
        d: usize,
    ) -> Self {
        Reduce1x1 {
            w: store.add(&format!("{prefix}.w"), &[d, c_in, 1, 1], Init::Xavier, rng),
            b: store.add(&format!("{prefix}.b"), &[d], Init::Zeros, rng),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionConfig {
    pub d: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub n_layers: usize,
    pub c_in: usize,
    pub norms: bool,
}

/// The full fusion network: channel reduction, N fusion layers, and the
/// final decode CFA whose query side is the search branch.
pub struct FusionNetwork {
    pub reduce_z: Reduce1x1,
    pub reduce_x: Reduce1x1,
    pub layers: Vec<FusionLayer>,
    pub final_cfa: CfaLayer,
    pub cfg: FusionConfig,
    prefix: String,
}

/// Per-layer attention weights captured during a forward pass.
pub struct LayerTrace {
    pub eca_z: Vec<Var>,
    pub eca_x: Vec<Var>,
    pub cfa_z: Vec<Var>,
    pub cfa_x: Vec<Var>,
}

/// Attention weights of the whole network, one entry per fusion layer plus
/// the final decode CFA.
pub struct FusionTrace {
    pub layers: Vec<LayerTrace>,
    pub final_cfa: Vec<Var>,
}

impl FusionNetwork {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl rand::Rng,
        prefix: &str,
        cfg: FusionConfig,
    ) -> Self {
        assert!(cfg.n_layers >= 1, "fusion needs at least one layer");
        let reduce_z = Reduce1x1::new(store, rng, &format!("{prefix}.reduce_z"), cfg.c_in, cfg.d);
        let reduce_x = Reduce1x1::new(store, rng, &format!("{prefix}.reduce_x"), cfg.c_in, cfg.d);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let lp = format!("{prefix}.layer{l}");
            layers.push(FusionLayer {
                eca_z: EcaLayer::new(store, rng, &format!("{lp}.eca_z"), cfg.d, cfg.n_heads, cfg.norms),
                eca_x: EcaLayer::new(store, rng, &format!("{lp}.eca_x"), cfg.d, cfg.n_heads, cfg.norms),
                cfa_z: CfaLayer::new(
                    store,
                    rng,
                    &format!("{lp}.cfa_z"),
                    cfg.d,
                    cfg.n_heads,
                    cfg.d_ffn,
                    cfg.norms,
                ),
                cfa_x: CfaLayer::new(
                    store,
                    rng,
                    &format!("{lp}.cfa_x"),
                    cfg.d,
                    cfg.n_heads,
                    cfg.d_ffn,
                    cfg.norms,
                ),
            });
        }
        let final_cfa = CfaLayer::new(
            store,
            rng,
            &format!("{prefix}.final_cfa"),
            cfg.d,
            cfg.n_heads,
            cfg.d_ffn,
            cfg.norms,
        );
        FusionNetwork {
            reduce_z,
            reduce_x,
            layers,
            final_cfa,
            cfg,
            prefix: prefix.to_string(),
        }
    }

    /// Scalar count of this network's trainable parameters.
    pub fn count_parameters(&self, store: &ParamStore) -> usize {
        store.count_trainable_prefix(&self.prefix)
    }

    /// 1×1-reduce a `[C×H×W]` feature map and flatten it to `[H·W × d]` tokens.
    pub fn reduce_to_tokens(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        map: Var,
        branch_z: bool,
    ) -> TokenSeq {
        let r = if branch_z { &self.reduce_z } else { &self.reduce_x };
        let (h, w) = {
            let s = tape.shape(map);
            assert_eq!(s[0], self.cfg.c_in, "reduce channel count");
            (s[1], s[2])
        };
        let wv = tape.param(store, r.w);
        let bv = tape.param(store, r.b);
        let spec = crate::tensor::math::ConvSpec { stride: 1, pad: 0, dilation: 1 };
        let red = tape.conv2d(map, wv, Some(bv), spec);
        // [d×H×W] → [d × H·W] → transpose to tokens-as-rows
        let flat = tape.reshape(red, &[self.cfg.d, h * w]);
        let tokens = tape.transpose2d(flat);
        TokenSeq::single(tokens, h, w)
    }

    /// Full forward with attention capture: N fusion layers then the decode
    /// CFA (query = search). Returns search tokens, last-layer template
    /// tokens, and the trace.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: TokenSeq,
        x: TokenSeq,
    ) -> (TokenSeq, TokenSeq, FusionTrace) {
        let enc_z = encodings_for_grids(&z.grids, self.cfg.d);
        let enc_x = encodings_for_grids(&x.grids, self.cfg.d);
        let mut zs = z;
        let mut xs = x;
        let mut layer_traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (z_self, t_eca_z) = eca_forward(tape, store, &layer.eca_z, &zs, &enc_z);
            let (x_self, t_eca_x) = eca_forward(tape, store, &layer.eca_x, &xs, &enc_x);
            let (z_cross, t_cfa_z) =
                cfa_forward(tape, store, &layer.cfa_z, &z_self, &enc_z, &x_self, &enc_x);
            let (x_cross, t_cfa_x) =
                cfa_forward(tape, store, &layer.cfa_x, &x_self, &enc_x, &z_self, &enc_z);
            zs = z_cross;
            xs = x_cross;
            layer_traces.push(LayerTrace {
                eca_z: t_eca_z,
                eca_x: t_eca_x,
                cfa_z: t_cfa_z,
                cfa_x: t_cfa_x,
            });
        }
        let (f, t_final) = cfa_forward(tape, store, &self.final_cfa, &xs, &enc_x, &zs, &enc_z);
        (
            f,
            zs,
            FusionTrace { layers: layer_traces, final_cfa: t_final },
        )
    }

    /// Forward without keeping the attention trace.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: TokenSeq,
        x: TokenSeq,
    ) -> (TokenSeq, TokenSeq) {
        let (f, zs, _) = self.forward_traced(tape, store, z, x);
        (f, zs)
    }
}

/// Fusion forward from raw feature maps: reduce both branches, flatten,
/// run the layer stack. `z_maps` holds one `[C×H_z×W_z]` map per template;
/// multiple maps are concatenated in the token dimension with per-grid
/// encodings.
pub fn fusion_forward(
    net: &FusionNetwork,
    tape: &mut Tape,
    store: &ParamStore,
    z_maps: &[Var],
    x_map: Var,
) -> (TokenSeq, TokenSeq) {
    let (f, zs, _) = fusion_forward_traced(net, tape, store, z_maps, x_map);
    (f, zs)
}

/// As [`fusion_forward`], also returning the attention trace.
pub fn fusion_forward_traced(
    net: &FusionNetwork,
    tape: &mut Tape,
    store: &ParamStore,
    z_maps: &[Var],
    x_map: Var,
) -> (TokenSeq, TokenSeq, FusionTrace) {
    assert!(!z_maps.is_empty(), "fusion needs at least one template");
    let parts: Vec<TokenSeq> = z_maps
        .iter()
        .map(|&m| net.reduce_to_tokens(tape, store, m, true))
        .collect();
    let z = if parts.len() == 1 {
        parts.into_iter().next().unwrap()
    } else {
        let vars: Vec<Var> = parts.iter().map(|p| p.var).collect();
        let grids: Vec<(usize, usize)> = parts.iter().flat_map(|p| p.grids.clone()).collect();
        TokenSeq { var: tape.concat(0, &vars), grids }
    };
    let x = net.reduce_to_tokens(tape, store, x_map, false);
    net.forward_traced(tape, store, z, x)
}

/// Depthwise cross-correlation of a template over a search map, both `[d×·×·]`.
pub fn depthwise_xcorr(tape: &mut Tape, template: Var, search: Var) -> Var {
    tape.depthwise_xcorr(search, template)
}
