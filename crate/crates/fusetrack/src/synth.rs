//! Synthetic tracking sequences: a colored shape wandering over a textured
//! background, optional look-alike distractors, per-frame ground truth boxes
//! and masks. Everything is a pure function of the seed.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{rng, Real, Tensor};
use crate::tracker::PixBox;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_frames: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub n_distractors: usize,
    pub motion_sigma: Real,
    pub jitter: bool,
    /// Target extent range in pixels (each of w, h drawn independently).
    pub size_lo: Real,
    pub size_hi: Real,
}

impl SynthConfig {
    pub fn new(seed: u64, n_frames: usize, n_distractors: usize, motion_sigma: Real, jitter: bool) -> Self {
        SynthConfig {
            seed,
            n_frames,
            frame_h: 256,
            frame_w: 256,
            n_distractors,
            motion_sigma,
            jitter,
            size_lo: 48.0,
            size_hi: 88.0,
        }
    }
}

pub struct SyntheticSequence {
    pub frames: Vec<Tensor>,
    pub gt_boxes: Vec<PixBox>,
    pub gt_masks: Vec<Tensor>,
    pub seed: u64,
}

struct Actor {
    kind: ShapeKind,
    color: [Real; 3],
    cx: Real,
    cy: Real,
    w: Real,
    h: Real,
}

fn hash2(seed: u64, i: usize, j: usize) -> Real {
    // cheap per-pixel hash for static background grain, in [-1, 1]
    let mut z = seed ^ ((i as u64) << 32) ^ (j as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    (z >> 11) as Real / (1u64 << 53) as Real * 2.0 - 1.0
}

fn paint_background(cfg: &SynthConfig, r: &mut impl rand::Rng) -> Tensor {
    let (h, w) = (cfg.frame_h, cfg.frame_w);
    let mut data = vec![0.0 as Real; 3 * h * w];
    let grain_seed = r.gen::<u64>();
    for c in 0..3 {
        let base = rng::uniform(r, 0.25, 0.55);
        let amp = rng::uniform(r, 0.05, 0.13);
        let fx = rng::uniform(r, 1.0, 4.0);
        let fy = rng::uniform(r, 1.0, 4.0);
        let px = rng::uniform(r, 0.0, 1.0);
        let py = rng::uniform(r, 0.0, 1.0);
        let plane = &mut data[c * h * w..(c + 1) * h * w];
        for i in 0..h {
            let vy = (std::f64::consts::TAU as Real * (fy * (i as Real + 0.5) / h as Real + py)).cos();
            for j in 0..w {
                let vx = (std::f64::consts::TAU as Real * (fx * (j as Real + 0.5) / w as Real + px)).sin();
                let grain = 0.03 * hash2(grain_seed.wrapping_add(c as u64), i, j);
                plane[i * w + j] = (base + amp * vx * vy + grain).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Closed-interval pixel-center span [lo, hi] -> column indices, clipped.
fn span(lo: Real, hi: Real, extent: usize) -> Option<(usize, usize)> {
    let a = (lo - 0.5).ceil().max(0.0) as isize;
    let b = (hi - 0.5).floor().min(extent as Real - 1.0) as isize;
    if a > b || b < 0 {
        return None;
    }
    Some((a as usize, b as usize))
}

fn row_half_width(actor: &Actor, py: Real) -> Option<Real> {
    match actor.kind {
        ShapeKind::Rect => {
            if (py - actor.cy).abs() <= actor.h / 2.0 {
                Some(actor.w / 2.0)
            } else {
                None
            }
        }
        ShapeKind::Ellipse => {
            let t = (py - actor.cy) / (actor.h / 2.0);
            if t.abs() <= 1.0 {
                Some(actor.w / 2.0 * (1.0 - t * t).sqrt())
            } else {
                None
            }
        }
    }
}

fn paint_actor(frame: &mut Tensor, actor: &Actor) {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let plane = h * w;
    let rows = match span(actor.cy - actor.h / 2.0, actor.cy + actor.h / 2.0, h) {
        Some(r) => r,
        None => return,
    };
    let data = frame.data_mut();
    for i in rows.0..=rows.1 {
        let hw = match row_half_width(actor, i as Real + 0.5) {
            Some(v) => v,
            None => continue,
        };
        if let Some((j0, j1)) = span(actor.cx - hw, actor.cx + hw, w) {
            for c in 0..3 {
                let off = c * plane + i * w;
                data[off + j0..off + j1 + 1].fill(actor.color[c]);
            }
        }
    }
}

fn paint_mask(mask: &mut Tensor, actor: &Actor) {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let rows = match span(actor.cy - actor.h / 2.0, actor.cy + actor.h / 2.0, h) {
        Some(r) => r,
        None => return,
    };
    let data = mask.data_mut();
    for i in rows.0..=rows.1 {
        let hw = match row_half_width(actor, i as Real + 0.5) {
            Some(v) => v,
            None => continue,
        };
        if let Some((j0, j1)) = span(actor.cx - hw, actor.cx + hw, w) {
            data[i * w + j0..i * w + j1 + 1].fill(1.0);
        }
    }
}

fn clamp_center(actor: &mut Actor, h: usize, w: usize) {
    let mx = (actor.w / 2.0 + 1.0).min(w as Real / 2.0);
    let my = (actor.h / 2.0 + 1.0).min(h as Real / 2.0);
    actor.cx = actor.cx.clamp(mx, w as Real - mx);
    actor.cy = actor.cy.clamp(my, h as Real - my);
}

fn sample_color(r: &mut impl rand::Rng, away_from: &[Real; 3]) -> [Real; 3] {
    // keep a contrast margin against the reference so shapes stay visible
    for _ in 0..32 {
        let c = [
            rng::uniform(r, 0.0, 1.0),
            rng::uniform(r, 0.0, 1.0),
            rng::uniform(r, 0.0, 1.0),
        ];
        let dist = c
            .iter()
            .zip(away_from)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0 as Real, Real::max);
        if dist >= 0.35 {
            return c;
        }
    }
    [1.0, 1.0, 1.0]
}

/// Generate a sequence with the given parameters and library defaults for
/// the frame geometry (256 square, target extents 48..88).
pub fn gen_synthetic(
    seed: u64,
    n_frames: usize,
    n_distractors: usize,
    motion_sigma: Real,
    jitter: bool,
) -> SyntheticSequence {
    gen_synthetic_with(&SynthConfig::new(seed, n_frames, n_distractors, motion_sigma, jitter))
}

pub fn gen_synthetic_with(cfg: &SynthConfig) -> SyntheticSequence {
    assert!(cfg.n_frames >= 2, "a sequence needs at least two frames");
    let (h, w) = (cfg.frame_h, cfg.frame_w);
    let mut r = rng::stream(&[rng::TAG_DATA, cfg.seed]);
    let background = paint_background(cfg, &mut r);
    let bg_probe = [
        background.data()[0],
        background.data()[h * w],
        background.data()[2 * h * w],
    ];

    let kind = if r.gen::<bool>() { ShapeKind::Rect } else { ShapeKind::Ellipse };
    let target_color = sample_color(&mut r, &bg_probe);
    let tw = rng::uniform(&mut r, cfg.size_lo, cfg.size_hi);
    let th = rng::uniform(&mut r, cfg.size_lo, cfg.size_hi);
    let mut target = Actor {
        kind,
        color: target_color,
        cx: rng::uniform(&mut r, tw / 2.0 + 1.0, w as Real - tw / 2.0 - 1.0),
        cy: rng::uniform(&mut r, th / 2.0 + 1.0, h as Real - th / 2.0 - 1.0),
        w: tw,
        h: th,
    };

    let mut distractors: Vec<Actor> = (0..cfg.n_distractors)
        .map(|_| {
            let scale_w = rng::uniform(&mut r, 0.75, 1.25);
            let scale_h = rng::uniform(&mut r, 0.75, 1.25);
            let mut color = target_color;
            for ch in &mut color {
                *ch = (*ch + rng::uniform(&mut r, -0.25, 0.25)).clamp(0.0, 1.0);
            }
            let dw = tw * scale_w;
            let dh = th * scale_h;
            Actor {
                kind,
                color,
                cx: rng::uniform(&mut r, dw / 2.0 + 1.0, w as Real - dw / 2.0 - 1.0),
                cy: rng::uniform(&mut r, dh / 2.0 + 1.0, h as Real - dh / 2.0 - 1.0),
                w: dw,
                h: dh,
            }
        })
        .collect();

    // uniform steps with the requested standard deviation
    let step_half = cfg.motion_sigma * (3.0 as Real).sqrt();
    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut gt_boxes = Vec::with_capacity(cfg.n_frames);
    let mut gt_masks = Vec::with_capacity(cfg.n_frames);

    for f in 0..cfg.n_frames {
        if f == 0 {
            clamp_center(&mut target, h, w);
            for a in &mut distractors {
                clamp_center(a, h, w);
            }
        } else if step_half > 0.0 {
            for a in distractors.iter_mut().chain(std::iter::once(&mut target)) {
                a.cx += rng::uniform(&mut r, -step_half, step_half);
                a.cy += rng::uniform(&mut r, -step_half, step_half);
                clamp_center(a, h, w);
            }
        }

        let mut frame = background.clone();
        for a in &distractors {
            paint_actor(&mut frame, a);
        }
        paint_actor(&mut frame, &target);

        if cfg.jitter {
            let gain = rng::uniform(&mut r, 0.8, 1.2);
            for v in frame.data_mut() {
                *v = (*v * gain).clamp(0.0, 1.0);
            }
        }

        let mut mask = Tensor::zeros(&[h, w]);
        paint_mask(&mut mask, &target);

        frames.push(frame);
        gt_boxes.push(PixBox::new(target.cx, target.cy, target.w, target.h));
        gt_masks.push(mask);
    }

    SyntheticSequence { frames, gt_boxes, gt_masks, seed: cfg.seed }
}

/// Write frames as `%06d.ppm`, boxes as `groundtruth.txt` (x,y,w,h lines),
/// masks as `mask%06d.pgm`.
pub fn write_sequence(dir: &Path, seq: &SyntheticSequence) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut gt = String::new();
    for (f, frame) in seq.frames.iter().enumerate() {
        crate::imageio::write_ppm(&dir.join(format!("{f:06}.ppm")), frame)?;
        crate::imageio::write_pgm(&dir.join(format!("mask{f:06}.pgm")), &seq.gt_masks[f])?;
        let (x, y, w, h) = seq.gt_boxes[f].xywh();
        gt.push_str(&format!("{x},{y},{w},{h}\n"));
    }
    std::fs::write(dir.join("groundtruth.txt"), gt)?;
    Ok(())
}

/// Read a sequence directory: sorted `*.ppm` frames plus `groundtruth.txt`.
pub fn read_sequence(dir: &Path) -> Result<(Vec<Tensor>, Vec<PixBox>)> {
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Sequence(format!("no ppm frames in {}", dir.display())));
    }
    let frames: Result<Vec<_>> = names.iter().map(|p| crate::imageio::read_ppm(p)).collect();
    let frames = frames?;
    let gt_raw = std::fs::read_to_string(dir.join("groundtruth.txt"))
        .map_err(|_| Error::Sequence("missing groundtruth.txt".into()))?;
    let boxes: Result<Vec<PixBox>> = gt_raw
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_gt_line)
        .collect();
    let boxes = boxes?;
    if boxes.len() != frames.len() {
        return Err(Error::Sequence(format!(
            "{} frames but {} groundtruth lines",
            frames.len(),
            boxes.len()
        )));
    }
    Ok((frames, boxes))
}

pub fn parse_gt_line(line: &str) -> Result<PixBox> {
    let parts: Vec<Real> = line
        .split(',')
        .map(|p| p.trim().parse::<Real>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Sequence(format!("bad groundtruth line: {line}")))?;
    if parts.len() != 4 {
        return Err(Error::Sequence(format!("bad groundtruth line: {line}")));
    }
    Ok(PixBox::from_xywh(parts[0], parts[1], parts[2], parts[3]))
}
