//! Mask prediction branch: two query-conditioned attention maps over the
//! fused search tokens, a top-down feature pyramid over the backbone stages,
//! and a small convolutional mask head at search resolution.

use crate::attention::{mha, MhaParams, TokenSeq};
use crate::backbone::PyramidFeatures;
use crate::error::{Error, Result};
use crate::tensor::math::ConvSpec;
use crate::tensor::param::{Init, ParamId, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Real;

/// FPN channel width; the mask head reads this many channels.
pub const FPN_CHANNELS: usize = 8;

/// Whether the branch consumes the query-conditioned attention maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegMode {
    /// Fusion tokens concatenated with both attention maps.
    Full,
    /// Fusion tokens only (the attention-map ablation).
    NoAttention,
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl rand::Rng,
        prefix: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
    ) -> Self {
        Conv {
            w: store.add(&format!("{prefix}.w"), &[c_out, c_in, k, k], Init::Xavier, rng),
            b: store.add(&format!("{prefix}.b"), &[c_out], Init::Zeros, rng),
        }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var, pad: usize) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, Some(b), ConvSpec { stride: 1, pad, dilation: 1 })
    }
}

/// Parameters of the segmentation branch.
pub struct SegBranch {
    pub attn_template: Option<MhaParams>,
    pub attn_search: Option<MhaParams>,
    proj: Conv,
    laterals: [Conv; 4],
    smooths: [Conv; 4],
    mask_head: Conv,
    pub mode: SegMode,
    pub n_heads: usize,
    d: usize,
}

impl SegBranch {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl rand::Rng,
        prefix: &str,
        d: usize,
        n_heads: usize,
        stage_channels: [usize; 4],
        mode: SegMode,
    ) -> Self {
        let with_attn = mode == SegMode::Full;
        let attn_template = with_attn
            .then(|| MhaParams::new(store, rng, &format!("{prefix}.attn_template"), d, n_heads));
        let attn_search = with_attn
            .then(|| MhaParams::new(store, rng, &format!("{prefix}.attn_search"), d, n_heads));
        let proj_in = if with_attn { d + 2 * n_heads } else { d };
        let proj = Conv::new(store, rng, &format!("{prefix}.proj"), FPN_CHANNELS, proj_in, 1);
        let laterals = std::array::from_fn(|i| {
            Conv::new(
                store,
                rng,
                &format!("{prefix}.lateral{i}"),
                FPN_CHANNELS,
                stage_channels[i],
                1,
            )
        });
        let smooths = std::array::from_fn(|i| {
            Conv::new(store, rng, &format!("{prefix}.smooth{i}"), FPN_CHANNELS, FPN_CHANNELS, 3)
        });
        let mask_head = Conv::new(store, rng, &format!("{prefix}.mask_head"), 1, FPN_CHANNELS, 3);
        SegBranch { attn_template, attn_search, proj, laterals, smooths, mask_head, mode, n_heads, d }
    }
}

/// Flat index of the center token of the first template grid.
pub fn center_template_index(tokens: &TokenSeq) -> usize {
    let (h, w) = tokens.grids[0];
    (h / 2) * w + w / 2
}

/// The token at the center of the initial template grid, `[1×d]`.
pub fn center_template_query(tape: &mut Tape, tokens: &TokenSeq) -> Var {
    tape.gather_rows(tokens.var, &[center_template_index(tokens)])
}

/// Flat index of the highest score; ties resolve to the lowest index.
pub fn top_score_index(scores: &[Real]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// The fused token with the highest classification score, `[1×d]`.
pub fn top_score_query(tape: &mut Tape, tokens: &TokenSeq, scores: &[Real]) -> Var {
    assert_eq!(tokens.token_count(), scores.len(), "top_score_query score count");
    tape.gather_rows(tokens.var, &[top_score_index(scores)])
}

/// Per-head attention weights of a single query over the token grid,
/// reshaped to `[n_h×H×W]`. Weights are the pre-projection softmax rows, so
/// each head's map sums to 1.
pub fn query_attention_map(
    tape: &mut Tape,
    store: &ParamStore,
    p: &MhaParams,
    query: Var,
    tokens: &TokenSeq,
) -> Var {
    assert_eq!(tokens.grids.len(), 1, "attention map needs a single grid");
    let (h, w) = tokens.grids[0];
    let out = mha(tape, store, p, query, tokens.var, tokens.var);
    let rows: Vec<Var> = out
        .weights
        .iter()
        .map(|&wv| tape.reshape(wv, &[1, h, w]))
        .collect();
    tape.concat(0, &rows)
}

/// Predict a foreground mask at search-patch resolution.
///
/// The fused tokens reshape to a `[d×H_x×W_x]` map, join the two attention
/// maps along channels, and seed the stride-8 pyramid level; lateral paths
/// mix in the backbone stages top-down, and a 3x3 head plus a final 2x
/// upsample and sigmoid produce the `[1×8H_x×8W_x]` mask.
pub fn seg_forward(
    tape: &mut Tape,
    store: &ParamStore,
    branch: &SegBranch,
    fusion_tokens: &TokenSeq,
    template_tokens: &TokenSeq,
    cls_scores: &[Real],
    pyramid: &PyramidFeatures,
) -> Result<Var> {
    assert_eq!(fusion_tokens.grids.len(), 1, "seg_forward needs the search grid");
    let (hx, wx) = fusion_tokens.grids[0];
    let d = branch.d;
    assert_eq!(tape.shape(fusion_tokens.var), &[hx * wx, d], "fusion token shape");

    let s3 = tape.shape(pyramid.stages[3]).to_vec();
    if s3[1] != hx || s3[2] != wx {
        return Err(Error::Shape(format!(
            "pyramid final stage {}×{} does not match the {hx}×{wx} token grid",
            s3[1], s3[2]
        )));
    }

    let fmap = {
        let t = tape.transpose2d(fusion_tokens.var);
        tape.reshape(t, &[d, hx, wx])
    };
    let cat = match (&branch.attn_template, &branch.attn_search) {
        (Some(pz), Some(px)) => {
            let qz = center_template_query(tape, template_tokens);
            let qx = top_score_query(tape, fusion_tokens, cls_scores);
            let map_z = query_attention_map(tape, store, pz, qz, fusion_tokens);
            let map_x = query_attention_map(tape, store, px, qx, fusion_tokens);
            tape.concat(0, &[fmap, map_z, map_x])
        }
        _ => fmap,
    };
    let seed = branch.proj.apply(tape, store, cat, 0);

    // top-down: stages 3 and 2 share stride 8, then 2x up to strides 4 and 2
    let lat3 = branch.laterals[3].apply(tape, store, pyramid.stages[3], 0);
    let sum3 = tape.add(lat3, seed);
    let p3 = branch.smooths[3].apply(tape, store, sum3, 1);

    let lat2 = branch.laterals[2].apply(tape, store, pyramid.stages[2], 0);
    let sum2 = tape.add(lat2, p3);
    let p2 = branch.smooths[2].apply(tape, store, sum2, 1);

    let up1 = tape.bilinear_resize(p2, 2 * hx, 2 * wx);
    let lat1 = branch.laterals[1].apply(tape, store, pyramid.stages[1], 0);
    let sum1 = tape.add(lat1, up1);
    let p1 = branch.smooths[1].apply(tape, store, sum1, 1);

    let up0 = tape.bilinear_resize(p1, 4 * hx, 4 * wx);
    let lat0 = branch.laterals[0].apply(tape, store, pyramid.stages[0], 0);
    let sum0 = tape.add(lat0, up0);
    let p0 = branch.smooths[0].apply(tape, store, sum0, 1);

    let m = branch.mask_head.apply(tape, store, p0, 1);
    let up = tape.bilinear_resize(m, 8 * hx, 8 * wx);
    Ok(tape.sigmoid(up))
}
