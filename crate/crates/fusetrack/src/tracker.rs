//! Online tracking: crop geometry, window penalty, candidate selection,
//! coordinate mapping, and the multi-slot template bank.

use crate::error::Result;
use crate::heads::BBoxN;
use crate::model::{CombineMode, Model};
use crate::tensor::param::ParamStore;
use crate::tensor::tape::Tape;
use crate::tensor::{Real, Tensor};

/// Axis-aligned box in image pixels, center format.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixBox {
    pub cx: Real,
    pub cy: Real,
    pub w: Real,
    pub h: Real,
}

impl PixBox {
    pub fn new(cx: Real, cy: Real, w: Real, h: Real) -> Self {
        PixBox { cx, cy, w, h }
    }

    /// From the corner format used by groundtruth files.
    pub fn from_xywh(x: Real, y: Real, w: Real, h: Real) -> Self {
        PixBox::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    /// To corner format (x, y, w, h).
    pub fn xywh(&self) -> (Real, Real, Real, Real) {
        (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)
    }

    pub fn iou(&self, other: &PixBox) -> Real {
        // scale invariant, so the normalized-box formula applies verbatim
        let a = BBoxN::new(self.cx, self.cy, self.w, self.h);
        let b = BBoxN::new(other.cx, other.cy, other.w, other.h);
        crate::losses::iou(&a, &b)
    }

    pub fn center_distance(&self, other: &PixBox) -> Real {
        ((self.cx - other.cx).powi(2) + (self.cy - other.cy).powi(2)).sqrt()
    }
}

/// Square crop request. `side` is in source pixels; the result is resampled
/// to `out_size`. Out-of-frame area takes `pad_value` per channel.
#[derive(Clone, Debug)]
pub struct CropSpec {
    pub center: (Real, Real),
    pub side: Real,
    pub out_size: usize,
    pub pad_value: [Real; 3],
}

/// Per-channel mean, the pad fill for crops that leave the frame.
pub fn channel_means(frame: &Tensor) -> [Real; 3] {
    let s = frame.shape();
    assert_eq!(s.len(), 3);
    assert_eq!(s[0], 3);
    let plane = s[1] * s[2];
    let mut out = [0.0; 3];
    for (c, slot) in out.iter_mut().enumerate() {
        *slot = frame.data()[c * plane..(c + 1) * plane].iter().sum::<Real>() / plane as Real;
    }
    out
}

/// Crop side for a target of extents (w, h): factor times the geometric
/// mean, factor 2 for templates and 4 for search regions.
pub fn crop_side(w: Real, h: Real, factor: Real) -> Real {
    factor * (w * h).sqrt()
}

/// Bilinear sample of one channel at a continuous point, pad outside.
fn sample(plane: &[Real], h: usize, w: usize, sx: Real, sy: Real, pad: Real) -> Real {
    let fx = sx - 0.5;
    let fy = sy - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let wx = fx - x0;
    let wy = fy - y0;
    let at = |yi: Real, xi: Real| -> Real {
        if yi < 0.0 || xi < 0.0 || yi >= h as Real || xi >= w as Real {
            pad
        } else {
            plane[yi as usize * w + xi as usize]
        }
    };
    let v00 = at(y0, x0);
    let v01 = at(y0, x0 + 1.0);
    let v10 = at(y0 + 1.0, x0);
    let v11 = at(y0 + 1.0, x0 + 1.0);
    v00 * (1.0 - wy) * (1.0 - wx) + v01 * (1.0 - wy) * wx + v10 * wy * (1.0 - wx) + v11 * wy * wx
}

/// Square crop centered at `spec.center`, bilinearly resampled to
/// `out_size`. With `side == out_size` and an integer-aligned corner the
/// result is an exact pixel copy.
pub fn crop_patch(frame: &Tensor, spec: &CropSpec) -> Tensor {
    assert!(spec.side > 0.0, "crop side must be positive");
    let s = frame.shape();
    assert_eq!(s.len(), 3);
    assert_eq!(s[0], 3);
    let (h, w) = (s[1], s[2]);
    let out = spec.out_size;
    let scale = spec.side / out as Real;
    let x_lo = spec.center.0 - spec.side / 2.0;
    let y_lo = spec.center.1 - spec.side / 2.0;
    let mut data = vec![0.0 as Real; 3 * out * out];
    for c in 0..3 {
        let plane = &frame.data()[c * h * w..(c + 1) * h * w];
        let dst = &mut data[c * out * out..(c + 1) * out * out];
        for i in 0..out {
            let sy = y_lo + (i as Real + 0.5) * scale;
            for j in 0..out {
                let sx = x_lo + (j as Real + 0.5) * scale;
                dst[i * out + j] = sample(plane, h, w, sx, sy, spec.pad_value[c]);
            }
        }
    }
    Tensor::new(&[3, out, out], data)
}

/// Single-plane variant of [`crop_patch`] for masks, pad 0.
pub fn crop_plane(plane: &Tensor, spec: &CropSpec) -> Tensor {
    assert!(spec.side > 0.0, "crop side must be positive");
    let s = plane.shape();
    assert_eq!(s.len(), 2);
    let (h, w) = (s[0], s[1]);
    let out = spec.out_size;
    let scale = spec.side / out as Real;
    let x_lo = spec.center.0 - spec.side / 2.0;
    let y_lo = spec.center.1 - spec.side / 2.0;
    let mut data = vec![0.0 as Real; out * out];
    for i in 0..out {
        let sy = y_lo + (i as Real + 0.5) * scale;
        for j in 0..out {
            let sx = x_lo + (j as Real + 0.5) * scale;
            data[i * out + j] = sample(plane.data(), h, w, sx, sy, 0.0);
        }
    }
    Tensor::new(&[out, out], data)
}

/// Outer product of symmetric Hann windows, peak 1, zero edges.
pub fn hanning2d(h: usize, w: usize) -> Tensor {
    assert!(h >= 2 && w >= 2, "window extents must be at least 2");
    let hann = |l: usize| -> Vec<Real> {
        (0..l)
            .map(|k| 0.5 * (1.0 - (std::f64::consts::TAU as Real * k as Real / (l as Real - 1.0)).cos()))
            .collect()
    };
    let hy = hann(h);
    let hx = hann(w);
    let mut data = vec![0.0 as Real; h * w];
    for i in 0..h {
        for j in 0..w {
            data[i * w + j] = hy[i] * hx[j];
        }
    }
    Tensor::new(&[h, w], data)
}

/// Convex blend of scores with the window: (1-w)*score + w*window.
pub fn window_penalty(score: &Tensor, window: &Tensor, w: Real) -> Tensor {
    assert_eq!(score.data().len(), window.data().len());
    let data: Vec<Real> = score
        .data()
        .iter()
        .zip(window.data())
        .map(|(&s, &win)| (1.0 - w) * s + w * win)
        .collect();
    Tensor::new(&[data.len()], data)
}

/// Argmax of the penalized score; ties go to the lowest index.
pub fn select_best(score_w: &Tensor, boxes: &[BBoxN]) -> (usize, BBoxN, Real) {
    assert_eq!(score_w.data().len(), boxes.len());
    assert!(!boxes.is_empty());
    let mut best = 0;
    for (k, &v) in score_w.data().iter().enumerate() {
        if v > score_w.data()[best] {
            best = k;
        }
    }
    (best, boxes[best], score_w.data()[best])
}

/// Map a normalized search-patch box to image pixels.
pub fn to_image_coords(b: &BBoxN, search_center: (Real, Real), side: Real) -> PixBox {
    PixBox::new(
        search_center.0 + (b.cx - 0.5) * side,
        search_center.1 + (b.cy - 0.5) * side,
        b.w * side,
        b.h * side,
    )
}

/// Inverse of [`to_image_coords`].
pub fn to_normalized(b: &PixBox, search_center: (Real, Real), side: Real) -> BBoxN {
    BBoxN::new(
        0.5 + (b.cx - search_center.0) / side,
        0.5 + (b.cy - search_center.1) / side,
        b.w / side,
        b.h / side,
    )
}

/// Stored template feature maps. Slot 0 holds the initial template and is
/// never replaced; later slots rotate oldest-first.
pub struct TemplateBank {
    slots: Vec<Tensor>,
    ages: Vec<u64>,
    counter: u64,
}

impl TemplateBank {
    /// Clone the initial template map into all `m` slots.
    pub fn new(initial: Tensor, m: usize) -> Self {
        assert!(m >= 1);
        TemplateBank {
            slots: vec![initial; m],
            ages: vec![0; m],
            counter: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.slots
    }

    pub fn slot0(&self) -> &Tensor {
        &self.slots[0]
    }

    /// Replace the oldest non-initial slot. A bank of capacity 1 holds only
    /// the immutable initial template, so the update is dropped.
    pub fn update(&mut self, map: Tensor) {
        if self.slots.len() == 1 {
            return;
        }
        let mut oldest = 1;
        for k in 2..self.slots.len() {
            if self.ages[k] < self.ages[oldest] {
                oldest = k;
            }
        }
        self.counter += 1;
        self.slots[oldest] = map;
        self.ages[oldest] = self.counter;
    }
}

/// Bank maps arranged for the fusion input: `concat` keeps every slot,
/// `avg` collapses them to one elementwise mean map.
pub fn combine_templates(bank: &TemplateBank, mode: CombineMode) -> Vec<Tensor> {
    match mode {
        CombineMode::Concat => bank.maps().to_vec(),
        CombineMode::Avg => {
            let mut acc = bank.slots[0].data().to_vec();
            for slot in &bank.slots[1..] {
                for (a, &b) in acc.iter_mut().zip(slot.data()) {
                    *a += b;
                }
            }
            let m = bank.slots.len() as Real;
            for a in &mut acc {
                *a /= m;
            }
            vec![Tensor::new(bank.slots[0].shape(), acc)]
        }
    }
}

pub struct TrackerState {
    pub bank: TemplateBank,
    pub prev_box: PixBox,
    pub window: Tensor,
    pub w_penalty: Real,
    pub threshold: Real,
    pub long_term: bool,
    pub mode: CombineMode,
}

/// One tracked frame: the predicted box with its raw classification score
/// and predicted IoU, plus the mask when requested and available.
pub struct StepOut {
    pub bbox: PixBox,
    pub score: Real,
    pub iou_pred: Real,
    pub mask: Option<Tensor>,
}

const TEMPLATE_FACTOR: Real = 2.0;
const SEARCH_FACTOR: Real = 4.0;

fn template_map_tensor(
    model: &Model,
    store: &ParamStore,
    frame: &Tensor,
    b: &PixBox,
) -> Result<Tensor> {
    let spec = CropSpec {
        center: (b.cx, b.cy),
        side: crop_side(b.w, b.h, TEMPLATE_FACTOR),
        out_size: model.profile().template_size,
        pad_value: channel_means(frame),
    };
    let patch = crop_patch(frame, &spec);
    let mut tape = Tape::new();
    let v = tape.input(patch);
    let map = model.template_map(&mut tape, store, v)?;
    Ok(tape.value(map).clone())
}

/// Start a sequence: fill the bank from the first frame's ground truth.
pub fn track_init(
    model: &Model,
    store: &ParamStore,
    frame: &Tensor,
    gt: &PixBox,
    cfg: &crate::config::TrackConfig,
) -> Result<TrackerState> {
    if gt.w <= 0.0 || gt.h <= 0.0 {
        return Err(crate::error::Error::Sequence(format!(
            "degenerate initial box {gt:?}"
        )));
    }
    let map = template_map_tensor(model, store, frame, gt)?;
    let (gh, gw) = model.out_grid();
    Ok(TrackerState {
        bank: TemplateBank::new(map, cfg.m),
        prev_box: *gt,
        window: hanning2d(gh, gw),
        w_penalty: cfg.w_penalty,
        threshold: cfg.threshold,
        long_term: cfg.long_term,
        mode: CombineMode::from_name(&cfg.mode)?,
    })
}

/// Track one frame: crop the search region around the previous box, run the
/// model against the bank, penalize off-center candidates, select, map back
/// to image pixels, and gate a template update on predicted quality.
pub fn track_step(
    state: &mut TrackerState,
    model: &Model,
    store: &ParamStore,
    frame: &Tensor,
    want_mask: bool,
) -> Result<StepOut> {
    let side = crop_side(state.prev_box.w, state.prev_box.h, SEARCH_FACTOR);
    let center = (state.prev_box.cx, state.prev_box.cy);
    let spec = CropSpec {
        center,
        side,
        out_size: model.profile().search_size,
        pad_value: channel_means(frame),
    };
    let patch = crop_patch(frame, &spec);

    let mut tape = Tape::new();
    let x = tape.input(patch);
    let maps = combine_templates(&state.bank, state.mode);
    let map_vars: Vec<_> = maps.iter().map(|m| tape.input(m.clone())).collect();
    let out = model.forward_with_maps(&mut tape, store, &map_vars, x, CombineMode::Concat, false)?;

    let scores = tape.value(out.scores).clone();
    let penalized = window_penalty(&scores, &state.window, state.w_penalty);
    let boxes = crate::heads::boxes_from_tensor(tape.value(out.boxes));
    let (best, bbox_n, _) = select_best(&penalized, &boxes);
    let raw_score = scores.data()[best];
    let iou_pred = tape.value(out.iou_pred).data()[best];

    let mask = if want_mask {
        let m = model.forward_mask(&mut tape, store, &out)?;
        Some(tape.value(m).clone())
    } else {
        None
    };

    let mut bbox = to_image_coords(&bbox_n, center, side);
    // keep the state usable: positive extent, center inside the frame
    let (fh, fw) = (frame.shape()[1] as Real, frame.shape()[2] as Real);
    bbox.w = bbox.w.max(2.0);
    bbox.h = bbox.h.max(2.0);
    bbox.cx = bbox.cx.clamp(0.0, fw);
    bbox.cy = bbox.cy.clamp(0.0, fh);
    state.prev_box = bbox;

    if !state.long_term && iou_pred > state.threshold && raw_score > 0.5 {
        let map = template_map_tensor(model, store, frame, &bbox)?;
        state.bank.update(map);
    }

    Ok(StepOut { bbox, score: raw_score, iou_pred, mask })
}

/// Run a whole sequence. The first result echoes the ground-truth init box.
pub fn run_sequence(
    model: &Model,
    store: &ParamStore,
    frames: &[Tensor],
    init: &PixBox,
    cfg: &crate::config::TrackConfig,
    want_masks: bool,
) -> Result<Vec<StepOut>> {
    let mut state = track_init(model, store, &frames[0], init, cfg)?;
    let mut out = Vec::with_capacity(frames.len());
    out.push(StepOut { bbox: *init, score: 1.0, iou_pred: 1.0, mask: None });
    for frame in &frames[1..] {
        out.push(track_step(&mut state, model, store, frame, want_masks)?);
    }
    Ok(out)
}
