//! Two-stage training on synthetic sequences.
//!
//! Stage 1 trains the backbone, fusion, and box heads with the
//! classification and regression losses; the backbone moves at a tenth of
//! the shared learning rate. Stage 2 freezes all of that and trains the
//! IoU prediction head, and optionally the mask branch, on top.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::heads::{assign_samples_at, BBoxN};
use crate::model::{CombineMode, CorrNet, Model, TrackNet};
use crate::profile::Profile;
use crate::segmentation::SegMode;
use crate::synth::{gen_synthetic_with, SynthConfig};
use crate::tensor::adamw::{AdamW, AdamWConfig, ParamGroup};
use crate::tensor::param::{GradStore, ParamStore};
use crate::tensor::tape::Tape;
use crate::tensor::{rng, Real, Tensor};
use crate::tracker::{crop_patch, crop_plane, crop_side, channel_means, to_normalized, CropSpec};

/// One training example: M template crops (slot 0 un-jittered), a search
/// crop, and the ground truth mapped into search-patch coordinates.
pub struct TrainSample {
    pub templates: Vec<Tensor>,
    pub search: Tensor,
    pub gt: BBoxN,
    pub gt_mask: Tensor,
}

/// Build a sample from a fresh synthetic sequence of M+1 frames: frames
/// 0..M-1 provide the templates, frame M the search region. Non-initial
/// template crops and the search crop geometry are jittered.
pub fn make_sample(profile: &Profile, m: usize, cfg: &TrainConfig, step: usize, k: usize) -> TrainSample {
    let seq_seed = rng::mix64(&[rng::TAG_DATA, cfg.seed, step as u64, k as u64]);
    let mut synth = SynthConfig::new(seq_seed, m + 1, cfg.n_distractors, cfg.motion_sigma, cfg.jitter);
    synth.seed = seq_seed;
    let seq = gen_synthetic_with(&synth);
    let mut jr = rng::stream(&[rng::TAG_JITTER, cfg.seed, step as u64, k as u64]);

    let mut templates = Vec::with_capacity(m);
    for f in 0..m {
        let mut b = seq.gt_boxes[f];
        if f > 0 {
            // imperfect template updates: shifted and rescaled crops
            b.cx += rng::uniform(&mut jr, -0.12, 0.12) * b.w;
            b.cy += rng::uniform(&mut jr, -0.12, 0.12) * b.h;
            b.w *= rng::uniform(&mut jr, -0.18 as Real, 0.18).exp();
            b.h *= rng::uniform(&mut jr, -0.18 as Real, 0.18).exp();
        }
        let spec = CropSpec {
            center: (b.cx, b.cy),
            side: crop_side(b.w, b.h, 2.0),
            out_size: profile.template_size,
            pad_value: channel_means(&seq.frames[f]),
        };
        templates.push(crop_patch(&seq.frames[f], &spec));
    }

    let gt = seq.gt_boxes[m];
    let scale = (w_extent(&gt) * rng::uniform(&mut jr, -0.75, 0.75), w_extent(&gt) * rng::uniform(&mut jr, -0.75, 0.75));
    let side = crop_side(gt.w, gt.h, 4.0) * rng::uniform(&mut jr, -0.18 as Real, 0.18).exp();
    let center = (gt.cx + scale.0, gt.cy + scale.1);
    let spec = CropSpec {
        center,
        side,
        out_size: profile.search_size,
        pad_value: channel_means(&seq.frames[m]),
    };
    let search = crop_patch(&seq.frames[m], &spec);
    let mask_crop = crop_plane(&seq.gt_masks[m], &spec);
    let gt_mask = Tensor::new(
        &[1, profile.search_size, profile.search_size],
        mask_crop.data().iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect(),
    );
    let gt_n = to_normalized(&gt, center, side);

    TrainSample { templates, search, gt: gt_n, gt_mask }
}

fn w_extent(b: &crate::tracker::PixBox) -> Real {
    (b.w * b.h).sqrt()
}

fn build_model(cfg: &TrainConfig, with_seg: bool) -> Result<(ParamStore, Model)> {
    let profile = Profile::from_name(&cfg.profile)?;
    let mut store = ParamStore::new();
    let mut r = rng::stream(&[rng::TAG_INIT, cfg.seed]);
    let model = if cfg.corr {
        Model::Corr(CorrNet::new(&mut store, &mut r, profile))
    } else {
        let seg = if with_seg { Some(SegMode::Full) } else { None };
        Model::Attn(TrackNet::new(&mut store, &mut r, profile, seg))
    };
    Ok((store, model))
}

pub struct TrainOut {
    pub store: ParamStore,
    pub model: Model,
    /// Per-step batch-mean loss.
    pub losses: Vec<Real>,
}

/// Run one batch: each element gets its own tape against the shared read-only
/// store, elements may evaluate concurrently, and gradients reduce in element
/// order. The reduction order is fixed, so the step is reproducible for any
/// thread count.
fn batch_grads<F>(
    cfg: &TrainConfig,
    profile: &Profile,
    step: usize,
    grads: &mut GradStore,
    eval: F,
) -> Result<Real>
where
    F: Fn(&mut Tape, &TrainSample) -> Result<crate::tensor::tape::Var> + Sync,
{
    use rayon::prelude::*;
    let per: Vec<Result<(Real, Vec<(crate::tensor::param::ParamId, Tensor)>)>> = (0..cfg.batch)
        .into_par_iter()
        .map(|k| {
            let sample = make_sample(profile, cfg.m, cfg, step, k);
            let mut tape = Tape::new();
            let loss = eval(&mut tape, &sample)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Train(format!("non-finite loss at step {step}")));
            }
            let tg = tape.backward(loss);
            let gs = tape.param_grads(&tg).map(|(id, g)| (id, g.clone())).collect();
            Ok((value, gs))
        })
        .collect();

    let mut batch_loss = 0.0;
    for r in per {
        let (value, gs) = r?;
        batch_loss += value;
        for (id, g) in gs {
            grads.accumulate(id, &g, 1.0 / cfg.batch as Real);
        }
    }
    Ok(batch_loss / cfg.batch as Real)
}

/// Stage-1 objective for one sample; returns the scalar loss node.
fn stage1_loss(tape: &mut Tape, store: &ParamStore, model: &Model, s: &TrainSample) -> Result<crate::tensor::tape::Var> {
    let tpl: Vec<_> = s.templates.iter().map(|t| tape.input(t.clone())).collect();
    let x = tape.input(s.search.clone());
    let out = model.forward(tape, store, &tpl, x, CombineMode::Concat, false)?;
    let assign = assign_samples_at(&s.gt, &out.centers);
    let cls = crate::losses::cls_loss(tape, out.scores, &assign.labels);
    let (reg, _) = crate::losses::reg_loss(tape, out.boxes, &s.gt, &assign.positives);
    Ok(tape.add(cls, reg))
}

/// Train backbone, fusion, and box heads from scratch.
pub fn train_stage1(cfg: &TrainConfig) -> Result<TrainOut> {
    let (mut store, model) = build_model(cfg, false)?;
    let profile = model.profile().clone();
    let opt_cfg = AdamWConfig {
        groups: vec![
            ParamGroup { prefix: String::new(), lr: cfg.lr, weight_decay: cfg.weight_decay },
            ParamGroup { prefix: "backbone".into(), lr: cfg.backbone_lr, weight_decay: cfg.weight_decay },
        ],
        ..Default::default()
    };
    let mut opt = AdamW::new(opt_cfg, &store);
    let mut grads = GradStore::new(&store);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        if cfg.lr_decay_at > 0 && step == cfg.lr_decay_at {
            opt.scale_lr(0.1);
        }
        grads.reset();
        let mean =
            batch_grads(cfg, &profile, step, &mut grads, |t, s| stage1_loss(t, &store, &model, s))?;
        opt.step(&mut store, &grads);
        losses.push(mean);
    }
    Ok(TrainOut { store, model, losses })
}

/// Stage-2 objective: IoU-prediction regression on detached boxes, plus the
/// mask losses when a mask branch is attached.
fn stage2_loss(
    tape: &mut Tape,
    store: &ParamStore,
    model: &Model,
    s: &TrainSample,
    seg: bool,
) -> Result<crate::tensor::tape::Var> {
    let tpl: Vec<_> = s.templates.iter().map(|t| tape.input(t.clone())).collect();
    let x = tape.input(s.search.clone());
    let out = model.forward(tape, store, &tpl, x, CombineMode::Concat, false)?;
    let assign = assign_samples_at(&s.gt, &out.centers);
    let boxes_value = tape.value(out.boxes).clone();
    let (iou_l, _) = crate::losses::iou_pred_loss(tape, out.iou_pred, &boxes_value, &s.gt, &assign.positives);
    if !seg {
        return Ok(iou_l);
    }
    let mask = model.forward_mask(tape, store, &out)?;
    let seg_l = crate::losses::seg_loss(tape, mask, &s.gt_mask);
    Ok(tape.add(iou_l, seg_l))
}

/// Freeze the stage-1 parameters and train the quality/mask heads. `base`
/// is a stage-1 checkpoint; parameters the checkpoint does not cover (the
/// fresh mask branch) keep their initialization.
pub fn train_stage2(cfg: &TrainConfig, base: &std::path::Path) -> Result<TrainOut> {
    let (mut store, model) = build_model(cfg, cfg.seg)?;
    crate::checkpoint::load_into(&mut store, base)?;
    for prefix in ["backbone", "fusion", "corr", "cls", "reg"] {
        store.set_trainable_prefix(prefix, false);
    }
    let profile = model.profile().clone();
    let opt_cfg = AdamWConfig {
        groups: vec![
            ParamGroup { prefix: String::new(), lr: cfg.iou_lr, weight_decay: cfg.iou_weight_decay },
            ParamGroup { prefix: "seg".into(), lr: cfg.seg_lr, weight_decay: cfg.iou_weight_decay },
        ],
        ..Default::default()
    };
    let mut opt = AdamW::new(opt_cfg, &store);
    let mut grads = GradStore::new(&store);
    let mut losses = Vec::with_capacity(cfg.stage2_steps);

    for step in 0..cfg.stage2_steps {
        grads.reset();
        // a distinct sample stream from stage 1, so the pairs are fresh
        let mean = batch_grads(cfg, &profile, cfg.steps + step, &mut grads, |t, s| {
            stage2_loss(t, &store, &model, s, cfg.seg)
        })?;
        opt.step(&mut store, &grads);
        losses.push(mean);
    }
    Ok(TrainOut { store, model, losses })
}
