//! Full tracking networks: the attention-fusion model and the depthwise
//! correlation ablation, behind one forward interface.

use crate::attention::TokenSeq;
use crate::backbone::{backbone_forward, Backbone, PyramidFeatures};
use crate::error::{Error, Result};
use crate::fusion::{
    depthwise_xcorr, fusion_forward_traced, FusionConfig, FusionNetwork, FusionTrace, Reduce1x1,
};
use crate::heads::{
    classification_head, foreground_scores, iou_head, offset_grid_centers, regression_head,
    token_centers, ClsHead, IouHead, RegHead,
};
use crate::profile::Profile;
use crate::segmentation::{seg_forward, SegBranch, SegMode};
use crate::tensor::param::ParamStore;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Real;

/// How the template bank's feature maps enter fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CombineMode {
    /// Stack template tokens in the sequence dimension.
    Concat,
    /// Average the template feature maps elementwise.
    Avg,
}

impl CombineMode {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "concat" => Ok(CombineMode::Concat),
            "avg" => Ok(CombineMode::Avg),
            other => Err(Error::Config(format!("unknown combine mode '{other}'"))),
        }
    }
}

/// Elementwise mean of equal-shaped feature maps.
pub fn average_maps(tape: &mut Tape, maps: &[Var]) -> Var {
    assert!(!maps.is_empty());
    let mut acc = maps[0];
    for &m in &maps[1..] {
        acc = tape.add(acc, m);
    }
    tape.scale(acc, 1.0 / maps.len() as Real)
}

/// One forward pass's outputs, shared by both model variants.
pub struct ModelOut {
    /// Per-token (foreground, background) logits, `[n×2]`.
    pub logits: Var,
    /// Foreground probabilities, `[n]`.
    pub scores: Var,
    /// Normalized predicted boxes, `[n×4]`.
    pub boxes: Var,
    /// Penultimate regression activations, `[n×d]`.
    pub reg_hidden: Var,
    /// Predicted IoU per token, `[n]`.
    pub iou_pred: Var,
    /// Fused search tokens.
    pub fusion_tokens: TokenSeq,
    /// Last-layer template tokens (attention model only).
    pub template_tokens: Option<TokenSeq>,
    /// Per-layer attention weights, when requested.
    pub trace: Option<FusionTrace>,
    /// Backbone pyramid of the search image.
    pub pyramid: PyramidFeatures,
    /// Output grid (rows, cols).
    pub grid: (usize, usize),
    /// Normalized center of each output token, row-major.
    pub centers: Vec<(Real, Real)>,
}

/// Attention-fusion tracker network.
pub struct TrackNet {
    pub backbone: Backbone,
    pub fusion: FusionNetwork,
    pub cls: ClsHead,
    pub reg: RegHead,
    pub iou: IouHead,
    pub seg: Option<SegBranch>,
    pub profile: Profile,
}

impl TrackNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl rand::Rng,
        profile: Profile,
        seg_mode: Option<SegMode>,
    ) -> Self {
        let backbone = Backbone::new(store, rng, "backbone", profile.backbone.clone());
        let fusion = FusionNetwork::new(
            store,
            rng,
            "fusion",
            FusionConfig {
                d: profile.d,
                n_heads: profile.n_heads,
                d_ffn: profile.d_ffn,
                n_layers: profile.n_layers,
                c_in: profile.c,
                norms: true,
            },
        );
        let cls = ClsHead::new(store, rng, "cls", profile.d);
        let reg = RegHead::new(store, rng, "reg", profile.d);
        let iou = IouHead::new(store, rng, "iou", profile.d);
        let seg = seg_mode.map(|mode| {
            SegBranch::new(
                store,
                rng,
                "seg",
                profile.d,
                profile.n_heads,
                profile.backbone.stage_channels,
                mode,
            )
        });
        TrackNet { backbone, fusion, cls, reg, iou, seg, profile }
    }

    /// Backbone features of one template crop; the map tracking caches.
    pub fn template_map(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        template: Var,
    ) -> Result<Var> {
        Ok(backbone_forward(tape, store, &self.backbone, template)?.final_map())
    }

    fn forward_with_maps(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        template_maps: &[Var],
        search: Var,
        mode: CombineMode,
        traced: bool,
    ) -> Result<ModelOut> {
        assert!(!template_maps.is_empty(), "empty template bank");
        let pyramid = backbone_forward(tape, store, &self.backbone, search)?;
        let z_maps: Vec<Var> = match mode {
            CombineMode::Concat => template_maps.to_vec(),
            CombineMode::Avg => vec![average_maps(tape, template_maps)],
        };
        let (fusion_tokens, template_tokens, trace) =
            fusion_forward_traced(&self.fusion, tape, store, &z_maps, pyramid.final_map());
        let logits = classification_head(tape, store, &self.cls, &fusion_tokens);
        let scores = foreground_scores(tape, logits);
        let (boxes, reg_hidden) = regression_head(tape, store, &self.reg, &fusion_tokens);
        let iou_pred = iou_head(tape, store, &self.iou, reg_hidden, &fusion_tokens);
        let grid = fusion_tokens.grids[0];
        let centers = token_centers(grid.0, grid.1);
        Ok(ModelOut {
            logits,
            scores,
            boxes,
            reg_hidden,
            iou_pred,
            fusion_tokens,
            template_tokens: Some(template_tokens),
            trace: traced.then_some(trace),
            pyramid,
            grid,
            centers,
        })
    }

    /// Predict a mask for a completed forward pass.
    pub fn forward_mask(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        out: &ModelOut,
    ) -> Result<Var> {
        let seg = self
            .seg
            .as_ref()
            .ok_or_else(|| Error::Config("model built without a mask branch".into()))?;
        let templ = out
            .template_tokens
            .as_ref()
            .ok_or_else(|| Error::Config("mask branch needs template tokens".into()))?;
        let scores = tape.value(out.scores).data().to_vec();
        seg_forward(tape, store, seg, &out.fusion_tokens, templ, &scores, &out.pyramid)
    }
}

/// Correlation ablation: shared backbone, per-branch channel reduction,
/// depthwise cross-correlation, and the same prediction heads on the
/// response map. Multiple templates enter by feature averaging.
pub struct CorrNet {
    pub backbone: Backbone,
    reduce_z: Reduce1x1,
    reduce_x: Reduce1x1,
    pub cls: ClsHead,
    pub reg: RegHead,
    pub iou: IouHead,
    pub profile: Profile,
}

impl CorrNet {
    pub fn new(store: &mut ParamStore, rng: &mut impl rand::Rng, profile: Profile) -> Self {
        let backbone = Backbone::new(store, rng, "backbone", profile.backbone.clone());
        let reduce_z = Reduce1x1::new(store, rng, "corr.reduce_z", profile.c, profile.d);
        let reduce_x = Reduce1x1::new(store, rng, "corr.reduce_x", profile.c, profile.d);
        let cls = ClsHead::new(store, rng, "cls", profile.d);
        let reg = RegHead::new(store, rng, "reg", profile.d);
        let iou = IouHead::new(store, rng, "iou", profile.d);
        CorrNet { backbone, reduce_z, reduce_x, cls, reg, iou, profile }
    }

    pub fn template_map(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        template: Var,
    ) -> Result<Var> {
        Ok(backbone_forward(tape, store, &self.backbone, template)?.final_map())
    }

    fn reduce(&self, tape: &mut Tape, store: &ParamStore, map: Var, branch_z: bool) -> Var {
        let r = if branch_z { &self.reduce_z } else { &self.reduce_x };
        let w = tape.param(store, r.w);
        let b = tape.param(store, r.b);
        tape.conv2d(map, w, Some(b), crate::tensor::math::ConvSpec { stride: 1, pad: 0, dilation: 1 })
    }

    fn forward_with_maps(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        template_maps: &[Var],
        search: Var,
    ) -> Result<ModelOut> {
        assert!(!template_maps.is_empty(), "empty template bank");
        let pyramid = backbone_forward(tape, store, &self.backbone, search)?;
        let z_map = if template_maps.len() == 1 {
            template_maps[0]
        } else {
            average_maps(tape, template_maps)
        };
        let z = self.reduce(tape, store, z_map, true);
        let x = self.reduce(tape, store, pyramid.final_map(), false);
        let (zh, zw, xh, xw) = {
            let sz = tape.shape(z);
            let sx = tape.shape(x);
            (sz[1], sz[2], sx[1], sx[2])
        };
        let raw = depthwise_xcorr(tape, z, x);
        // mean-normalized response keeps activations near unit scale
        let resp = tape.scale(raw, 1.0 / (zh * zw) as Real);
        let (oh, ow) = (xh - zh + 1, xw - zw + 1);
        let flat = tape.reshape(resp, &[self.profile.d, oh * ow]);
        let tokens = TokenSeq::single(tape.transpose2d(flat), oh, ow);
        let logits = classification_head(tape, store, &self.cls, &tokens);
        let scores = foreground_scores(tape, logits);
        let (boxes, reg_hidden) = regression_head(tape, store, &self.reg, &tokens);
        let iou_pred = iou_head(tape, store, &self.iou, reg_hidden, &tokens);
        // response cell (i,j) is the template centered at offset (i,j)
        let centers = offset_grid_centers(
            oh,
            ow,
            (zh as Real - 1.0) / 2.0,
            (zw as Real - 1.0) / 2.0,
            xh,
            xw,
        );
        Ok(ModelOut {
            logits,
            scores,
            boxes,
            reg_hidden,
            iou_pred,
            fusion_tokens: tokens,
            template_tokens: None,
            trace: None,
            pyramid,
            grid: (oh, ow),
            centers,
        })
    }
}

/// Either model variant behind one forward interface.
pub enum Model {
    Attn(TrackNet),
    Corr(CorrNet),
}

impl Model {
    pub fn profile(&self) -> &Profile {
        match self {
            Model::Attn(m) => &m.profile,
            Model::Corr(m) => &m.profile,
        }
    }

    /// Output grid for a given profile (response map for the correlation
    /// variant, the stride-8 search grid otherwise).
    pub fn out_grid(&self) -> (usize, usize) {
        let p = self.profile();
        let (sh, sw) = p.search_grid();
        match self {
            Model::Attn(_) => (sh, sw),
            Model::Corr(_) => {
                let (th, tw) = p.template_grid();
                (sh - th + 1, sw - tw + 1)
            }
        }
    }

    /// Backbone features of one template crop.
    pub fn template_map(&self, tape: &mut Tape, store: &ParamStore, template: Var) -> Result<Var> {
        match self {
            Model::Attn(m) => m.template_map(tape, store, template),
            Model::Corr(m) => m.template_map(tape, store, template),
        }
    }

    /// Forward from cached template feature maps.
    pub fn forward_with_maps(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        template_maps: &[Var],
        search: Var,
        mode: CombineMode,
        traced: bool,
    ) -> Result<ModelOut> {
        match self {
            Model::Attn(m) => m.forward_with_maps(tape, store, template_maps, search, mode, traced),
            Model::Corr(m) => m.forward_with_maps(tape, store, template_maps, search),
        }
    }

    /// Forward from raw template crops.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        templates: &[Var],
        search: Var,
        mode: CombineMode,
        traced: bool,
    ) -> Result<ModelOut> {
        let mut maps = Vec::with_capacity(templates.len());
        for &t in templates {
            maps.push(self.template_map(tape, store, t)?);
        }
        self.forward_with_maps(tape, store, &maps, search, mode, traced)
    }

    /// Predict a mask for a completed forward pass (attention model with a
    /// mask branch only).
    pub fn forward_mask(&self, tape: &mut Tape, store: &ParamStore, out: &ModelOut) -> Result<Var> {
        match self {
            Model::Attn(m) => m.forward_mask(tape, store, out),
            Model::Corr(_) => Err(Error::Config(
                "the correlation ablation has no mask branch".into(),
            )),
        }
    }
}

/// Search-region ground truth for one training sample.
#[derive(Clone, Copy, Debug)]
pub struct SampleGt {
    pub bbox: crate::heads::BBoxN,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{rng, Tensor};

    fn toy_mini_profile() -> Profile {
        // structurally toy-like but small enough for fast tests
        Profile {
            name: "toy",
            d: 8,
            n_heads: 2,
            d_ffn: 16,
            n_layers: 1,
            c: 8,
            template_size: 16,
            search_size: 32,
            m: 2,
            backbone: crate::backbone::BackboneConfig {
                stage_channels: [4, 5, 6, 8],
                convs_per_stage: 1,
            },
        }
    }

    fn build_attn(seg: Option<SegMode>) -> (ParamStore, Model) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(&[rng::TAG_INIT, 70]);
        let net = TrackNet::new(&mut store, &mut r, toy_mini_profile(), seg);
        (store, Model::Attn(net))
    }

    fn crops(tape: &mut Tape, p: &Profile, seed: u64) -> (Var, Var) {
        let mut r = rng::stream(&[seed]);
        let z = tape.input(Tensor::uniform(&[3, p.template_size, p.template_size], 0.0, 1.0, &mut r));
        let x = tape.input(Tensor::uniform(&[3, p.search_size, p.search_size], 0.0, 1.0, &mut r));
        (z, x)
    }

    #[test]
    fn attn_forward_contract_shapes() {
        let (store, model) = build_attn(Some(SegMode::Full));
        let p = model.profile().clone();
        let mut t = Tape::new();
        let (z, x) = crops(&mut t, &p, 71);
        let out = model.forward(&mut t, &store, &[z], x, CombineMode::Concat, true).unwrap();
        let n = 4 * 4;
        assert_eq!(out.grid, (4, 4));
        assert_eq!(t.shape(out.logits), &[n, 2]);
        assert_eq!(t.shape(out.scores), &[n]);
        assert_eq!(t.shape(out.boxes), &[n, 4]);
        assert_eq!(t.shape(out.iou_pred), &[n]);
        assert_eq!(out.centers.len(), n);
        assert!(out.trace.is_some());
        assert_eq!(out.trace.as_ref().unwrap().layers.len(), 1);
        let mask = model.forward_mask(&mut t, &store, &out).unwrap();
        assert_eq!(t.shape(mask), &[1, p.search_size, p.search_size]);
    }

    #[test]
    fn multi_template_duplication_matches_single() {
        let (store, model) = build_attn(None);
        let p = model.profile().clone();
        let mut t = Tape::new();
        let (z, x) = crops(&mut t, &p, 72);
        let one = model.forward(&mut t, &store, &[z], x, CombineMode::Concat, false).unwrap();
        let three = model
            .forward(&mut t, &store, &[z, z, z], x, CombineMode::Concat, false)
            .unwrap();
        assert!(t.value(one.boxes).max_abs_diff(t.value(three.boxes)) < 1e-9);
        assert!(t.value(one.scores).max_abs_diff(t.value(three.scores)) < 1e-9);
        assert!(t.value(one.iou_pred).max_abs_diff(t.value(three.iou_pred)) < 1e-9);
    }

    #[test]
    fn avg_of_identical_templates_is_identity() {
        let (store, model) = build_attn(None);
        let p = model.profile().clone();
        let mut t = Tape::new();
        let (z, x) = crops(&mut t, &p, 73);
        let concat1 = model.forward(&mut t, &store, &[z], x, CombineMode::Concat, false).unwrap();
        let avg2 = model.forward(&mut t, &store, &[z, z], x, CombineMode::Avg, false).unwrap();
        // mean of two identical maps is the map itself, so outputs agree
        assert!(t.value(concat1.boxes).max_abs_diff(t.value(avg2.boxes)) < 1e-12);
    }

    #[test]
    fn corr_forward_contract_shapes() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(&[rng::TAG_INIT, 74]);
        let model = Model::Corr(CorrNet::new(&mut store, &mut r, toy_mini_profile()));
        let p = model.profile().clone();
        let mut t = Tape::new();
        let (z, x) = crops(&mut t, &p, 75);
        let out = model.forward(&mut t, &store, &[z], x, CombineMode::Concat, false).unwrap();
        // 2x2 template grid over a 4x4 search grid leaves a 3x3 response
        assert_eq!(out.grid, (3, 3));
        assert_eq!(model.out_grid(), (3, 3));
        assert_eq!(t.shape(out.logits), &[9, 2]);
        assert_eq!(t.shape(out.boxes), &[9, 4]);
        assert!(out.template_tokens.is_none());
        // response centers sit at template-center offsets inside the search grid
        let eps = 1e-12;
        assert!((out.centers[0].0 - (0.0 + 0.5 + 0.5) / 4.0).abs() < eps);
        assert!((out.centers[0].1 - (0.0 + 0.5 + 0.5) / 4.0).abs() < eps);
        assert!((out.centers[8].0 - (2.0 + 0.5 + 0.5) / 4.0).abs() < eps);
    }

    #[test]
    fn corr_rejects_mask_requests() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(&[rng::TAG_INIT, 76]);
        let model = Model::Corr(CorrNet::new(&mut store, &mut r, toy_mini_profile()));
        let p = model.profile().clone();
        let mut t = Tape::new();
        let (z, x) = crops(&mut t, &p, 77);
        let out = model.forward(&mut t, &store, &[z], x, CombineMode::Concat, false).unwrap();
        assert!(model.forward_mask(&mut t, &store, &out).is_err());
    }

    #[test]
    fn trained_grid_matches_profile_arithmetic() {
        let (_, model) = build_attn(None);
        assert_eq!(model.out_grid(), (4, 4));
    }

    #[test]
    fn full_model_gradient_check() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(&[rng::TAG_INIT, 78]);
        let net = TrackNet::new(&mut store, &mut r, toy_mini_profile(), None);
        let model = Model::Attn(net);
        let p = model.profile().clone();
        let mut rr = rng::stream(&[79]);
        let zv = Tensor::uniform(&[3, p.template_size, p.template_size], 0.0, 1.0, &mut rr);
        let xv = Tensor::uniform(&[3, p.search_size, p.search_size], 0.0, 1.0, &mut rr);
        let report = crate::tensor::check::check_gradients(&mut store, 1, |t, s| {
            let z = t.input(zv.clone());
            let x = t.input(xv.clone());
            let out = model.forward(t, s, &[z], x, CombineMode::Concat, false).unwrap();
            let a = t.sum(out.logits);
            let b = t.sum(out.boxes);
            let c = t.sum(out.iou_pred);
            let ab = t.add(a, b);
            t.add(ab, c)
        });
        assert!(report.ok(), "max rel err {}, failures: {:?}", report.max_rel_err, report.failures);
    }

    #[test]
    fn corr_gradient_check() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(&[rng::TAG_INIT, 80]);
        let model = Model::Corr(CorrNet::new(&mut store, &mut r, toy_mini_profile()));
        // the raw correlation response is tiny at init, which parks the
        // zero-initialized head biases on their relu kinks; finite
        // differences are meaningless there, so probe a generic point
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            if name.ends_with(".b") {
                let shape = store.value(id).shape().to_vec();
                *store.value_mut(id) = Tensor::uniform(&shape, -0.1, 0.1, &mut r);
            } else if name.starts_with("corr.reduce") {
                for v in store.value_mut(id).data_mut() {
                    *v *= 8.0;
                }
            }
        }
        let p = model.profile().clone();
        let mut rr = rng::stream(&[81]);
        let zv = Tensor::uniform(&[3, p.template_size, p.template_size], 0.0, 1.0, &mut rr);
        let xv = Tensor::uniform(&[3, p.search_size, p.search_size], 0.0, 1.0, &mut rr);
        let report = crate::tensor::check::check_gradients(&mut store, 1, |t, s| {
            let z = t.input(zv.clone());
            let x = t.input(xv.clone());
            let out = model.forward(t, s, &[z], x, CombineMode::Concat, false).unwrap();
            let a = t.sum(out.logits);
            let b = t.sum(out.boxes);
            t.add(a, b)
        });
        assert!(report.ok(), "max rel err {}, failures: {:?}", report.max_rel_err, report.failures);
    }
}
