//! Command-line interface.
//!
//! Subcommands cover the whole artifact surface: training, tracking a frame
//! directory, scoring results, the finite-difference gradient battery,
//! parameter counts, synthetic-data generation, and attention-map dumps.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::{TrackConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::imageio::write_pgm;
use crate::model::{CorrNet, Model, TrackNet};
use crate::profile::Profile;
use crate::segmentation::SegMode;
use crate::synth::{gen_synthetic, parse_gt_line, read_sequence, write_sequence};
use crate::tensor::param::ParamStore;
use crate::tensor::{rng, Real, Tensor};
use crate::tracker::{self, run_sequence, PixBox, StepOut};
use crate::train::{train_stage1, train_stage2};
use crate::vis::dump_attention;

#[derive(Parser, Debug)]
#[command(name = "fusetrack", version, about = "attention-fusion single-object tracker")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Train from scratch (stage 1) or refine quality/mask heads (stage 2).
    Train(TrainArgs),
    /// Track a sequence directory and write one result line per frame.
    Track(TrackArgs),
    /// Score a results file against ground truth.
    Eval(EvalArgs),
    /// Finite-difference gradient battery over the core operations.
    Gradcheck(GradcheckArgs),
    /// Parameter counts for a profile.
    Params(ParamsArgs),
    /// Generate a synthetic sequence directory.
    Synth(SynthArgs),
    /// Write attention maps for a template/search pair.
    DumpAttn(DumpAttnArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Model size profile.
    #[arg(long, default_value = "toy")]
    pub profile: String,
    /// key=value config file overlaying the profile defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Template bank capacity M used for training samples.
    #[arg(long)]
    pub m: Option<usize>,
    /// Output checkpoint path.
    #[arg(long, default_value = "model.ttk")]
    pub ckpt: PathBuf,
    /// Run stage 2 (quality/mask heads) on top of --base.
    #[arg(long, requires = "base")]
    pub stage2: bool,
    /// Stage-1 checkpoint to refine when --stage2 is set.
    #[arg(long)]
    pub base: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrackArgs {
    /// Sequence directory: numbered .ppm frames plus groundtruth.txt.
    #[arg(long)]
    pub seq: PathBuf,
    /// Checkpoint to load; the model shape is inferred from its contents.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "toy")]
    pub profile: String,
    /// key=value tracker config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Template bank capacity.
    #[arg(long)]
    pub m: Option<usize>,
    /// Template combination: concat or avg.
    #[arg(long)]
    pub mode: Option<String>,
    /// Disable template updates entirely.
    #[arg(long)]
    pub long_term: bool,
    /// Window penalty weight.
    #[arg(long)]
    pub w_penalty: Option<Real>,
    /// Predicted-IoU gate for template updates.
    #[arg(long)]
    pub threshold: Option<Real>,
    /// Results file, one x,y,w,h,score,iou_pred line per frame.
    #[arg(long, default_value = "results.csv")]
    pub out: PathBuf,
    /// Also write per-frame masks (PGM, 255 = foreground) to this directory.
    #[arg(long)]
    pub masks: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Results file produced by `track`.
    #[arg(long)]
    pub results: PathBuf,
    /// Ground-truth file, one x,y,w,h line per frame.
    #[arg(long)]
    pub gt: PathBuf,
    /// Precision radius in pixels.
    #[arg(long, default_value_t = 20.0)]
    pub k: Real,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[arg(long, default_value = "toy")]
    pub profile: String,
    /// Override the fusion layer count N.
    #[arg(long)]
    pub layers: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long, default_value = "synth_seq")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 60)]
    pub frames: usize,
    #[arg(long, default_value_t = 2)]
    pub distractors: usize,
    #[arg(long, default_value_t = 3.0)]
    pub motion_sigma: Real,
    /// Disable per-frame brightness jitter.
    #[arg(long)]
    pub no_jitter: bool,
}

#[derive(Args, Debug)]
pub struct DumpAttnArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "toy")]
    pub profile: String,
    /// Sequence directory for the pair; a synthetic one is generated when absent.
    #[arg(long)]
    pub seq: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "attn_maps")]
    pub out: PathBuf,
}

/// Build the model whose parameter set matches a checkpoint's contents.
fn model_for_checkpoint(profile: Profile, ckpt: &Path) -> Result<(ParamStore, Model)> {
    let names = checkpoint::names(ckpt)?;
    let corr = names.iter().any(|n| n.starts_with("corr."));
    let seg = names.iter().any(|n| n.starts_with("seg."));
    let mut store = ParamStore::new();
    let mut r = rng::stream(&[rng::TAG_INIT, 0]);
    let model = if corr {
        Model::Corr(CorrNet::new(&mut store, &mut r, profile))
    } else {
        let seg_mode = seg.then_some(SegMode::Full);
        Model::Attn(TrackNet::new(&mut store, &mut r, profile, seg_mode))
    };
    checkpoint::load_into(&mut store, ckpt)?;
    Ok((store, model))
}

/// One results line per frame: `x,y,w,h,score,iou_pred`.
pub fn write_results(path: &Path, outs: &[StepOut]) -> Result<()> {
    let mut text = String::new();
    for o in outs {
        let (x, y, w, h) = o.bbox.xywh();
        text.push_str(&format!("{x:.3},{y:.3},{w:.3},{h:.3},{:.4},{:.4}\n", o.score, o.iou_pred));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Parse a results file back into boxes with their scores.
pub fn read_results(path: &Path) -> Result<Vec<(PixBox, Real, Real)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Sequence(format!(
                "results line {}: expected 6 fields, got {}",
                i + 1,
                fields.len()
            )));
        }
        let mut v = [0.0 as Real; 6];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f
                .trim()
                .parse()
                .map_err(|_| Error::Sequence(format!("results line {}: bad number {f}", i + 1)))?;
        }
        out.push((PixBox::from_xywh(v[0], v[1], v[2], v[3]), v[4], v[5]));
    }
    Ok(out)
}

fn read_gt_file(path: &Path) -> Result<Vec<PixBox>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_gt_line)
        .collect()
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::default();
    cfg.profile = a.profile.clone();
    if let Some(path) = &a.config {
        cfg.overlay_file(path)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.m {
        cfg.m = m;
    }
    let out = if a.stage2 {
        train_stage2(&cfg, a.base.as_ref().unwrap())?
    } else {
        train_stage1(&cfg)?
    };
    checkpoint::save(&out.store, &a.ckpt)?;
    let last = out.losses.last().copied().unwrap_or(Real::NAN);
    println!("trained {} steps, final loss {last:.4}, wrote {}", out.losses.len(), a.ckpt.display());
    Ok(())
}

fn cmd_track(a: &TrackArgs) -> Result<()> {
    let mut cfg = TrackConfig::default();
    if let Some(path) = &a.config {
        cfg.overlay_file(path)?;
    }
    if let Some(m) = a.m {
        cfg.m = m;
    }
    if let Some(mode) = &a.mode {
        cfg.mode = mode.clone();
    }
    if a.long_term {
        cfg.long_term = true;
    }
    if let Some(w) = a.w_penalty {
        cfg.w_penalty = w;
    }
    if let Some(t) = a.threshold {
        cfg.threshold = t;
    }
    cfg.validate()?;

    let profile = Profile::from_name(&a.profile)?;
    let (store, model) = model_for_checkpoint(profile, &a.ckpt)?;
    let (frames, gt) = read_sequence(&a.seq)?;
    if frames.is_empty() || gt.is_empty() {
        return Err(Error::Sequence("empty sequence".into()));
    }
    let want_masks = a.masks.is_some();
    let outs = run_sequence(&model, &store, &frames, &gt[0], &cfg, want_masks)?;
    write_results(&a.out, &outs)?;

    if let Some(mask_dir) = &a.masks {
        std::fs::create_dir_all(mask_dir)?;
        for (i, o) in outs.iter().enumerate() {
            let Some(m) = &o.mask else { continue };
            // 255 = foreground, thresholded at 0.5
            let (h, w) = (m.shape()[m.shape().len() - 2], m.shape()[m.shape().len() - 1]);
            let bin: Vec<Real> = m.data().iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
            let img = Tensor::new(&[h, w], bin);
            write_pgm(&mask_dir.join(format!("mask{i:06}.pgm")), &img)?;
        }
    }
    println!("tracked {} frames, wrote {}", outs.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let results: Vec<PixBox> = read_results(&a.results)?.into_iter().map(|(b, _, _)| b).collect();
    let gt = read_gt_file(&a.gt)?;
    let rep = evaluate(&results, &gt, a.k)?;
    println!("frames: {}", rep.n_frames);
    println!("mean_iou: {:.4}", rep.mean_iou);
    println!("success_auc: {:.4}", rep.success_auc);
    println!("precision@{}: {:.4}", a.k, rep.precision);
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let mut failed = false;
    for (name, report) in gradcheck_battery(a.seed) {
        println!("{name}: max rel err {:.3e} over {} coords", report.max_rel_err, report.checked);
        if !report.ok() {
            failed = true;
            for f in report.failures.iter().take(3) {
                eprintln!("  {}[{}]: analytic {} vs numeric {}", f.name, f.coord, f.analytic, f.numeric);
            }
        }
    }
    if failed {
        return Err(Error::Train("gradient check failed".into()));
    }
    Ok(())
}

fn cmd_params(a: &ParamsArgs) -> Result<()> {
    let mut profile = Profile::from_name(&a.profile)?;
    if let Some(n) = a.layers {
        profile.n_layers = n;
    }
    let mut store = ParamStore::new();
    let mut r = rng::stream(&[rng::TAG_INIT, 0]);
    let _net = TrackNet::new(&mut store, &mut r, profile, None);
    let count_prefix = |p: &str| -> usize {
        store
            .ids()
            .filter(|&id| store.name(id).starts_with(p))
            .map(|id| store.value(id).numel())
            .sum()
    };
    let total: usize = store.ids().map(|id| store.value(id).numel()).sum();
    println!("fusion: {}", count_prefix("fusion."));
    println!("backbone: {}", count_prefix("backbone."));
    println!("heads: {}", count_prefix("cls.") + count_prefix("reg.") + count_prefix("iou."));
    println!("total: {total}");
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let seq = gen_synthetic(a.seed, a.frames, a.distractors, a.motion_sigma, !a.no_jitter);
    write_sequence(&a.out, &seq)?;
    println!("wrote {} frames to {}", seq.frames.len(), a.out.display());
    Ok(())
}

fn cmd_dump_attn(a: &DumpAttnArgs) -> Result<()> {
    let profile = Profile::from_name(&a.profile)?;
    let (store, model) = model_for_checkpoint(profile.clone(), &a.ckpt)?;
    let (frames, gt) = match &a.seq {
        Some(dir) => read_sequence(dir)?,
        None => {
            let seq = gen_synthetic(a.seed, 2, 2, 3.0, false);
            (seq.frames, seq.gt_boxes)
        }
    };
    if frames.len() < 2 {
        return Err(Error::Sequence("need at least two frames".into()));
    }
    let b = &gt[0];
    let template = tracker::crop_patch(
        &frames[0],
        &tracker::CropSpec {
            center: (b.cx, b.cy),
            side: tracker::crop_side(b.w, b.h, 2.0),
            out_size: profile.template_size,
            pad_value: tracker::channel_means(&frames[0]),
        },
    );
    let search = tracker::crop_patch(
        &frames[1],
        &tracker::CropSpec {
            center: (b.cx, b.cy),
            side: tracker::crop_side(b.w, b.h, 4.0),
            out_size: profile.search_size,
            pad_value: tracker::channel_means(&frames[1]),
        },
    );
    let files = dump_attention(&model, &store, &template, &search, &a.out)?;
    println!("wrote {} maps to {}", files.len(), a.out.display());
    Ok(())
}

/// Run one parsed command. Errors bubble up for `main` to report.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Track(a) => cmd_track(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Params(a) => cmd_params(a),
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::DumpAttn(a) => cmd_dump_attn(a),
    }
}

/// The gradient battery behind `gradcheck`: one small graph per core
/// operation family, each checked against central differences.
pub fn gradcheck_battery(seed: u64) -> Vec<(&'static str, crate::tensor::check::GradReport)> {
    use crate::tensor::check::check_gradients;
    use crate::tensor::param::Init;

    let mut out = Vec::new();
    let mut r = rng::stream(&[rng::TAG_INIT, seed]);

    // affine + relu + sigmoid chain
    {
        let mut store = ParamStore::new();
        let w = store.add("w", &[3, 4], Init::Xavier, &mut r);
        let b = store.add("b", &[4], Init::Uniform(0.3), &mut r);
        let x = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut r);
        let rep = check_gradients(&mut store, usize::MAX, |t, s| {
            let xv = t.input(x.clone());
            let wv = t.param(s, w);
            let bv = t.param(s, b);
            let h = t.matmul(xv, wv);
            let h = t.add_row_bias(h, bv);
            let h = t.relu(h);
            let h = t.sigmoid(h);
            t.sum(h)
        });
        out.push(("matmul_bias_relu_sigmoid", rep));
    }

    // softmax + log + mul
    {
        let mut store = ParamStore::new();
        let w = store.add("w", &[4, 5], Init::Xavier, &mut r);
        let rep = check_gradients(&mut store, usize::MAX, |t, s| {
            let wv = t.param(s, w);
            let sm = t.softmax(wv);
            let shifted = t.add_scalar(sm, 1e-12);
            let lg = t.log(shifted);
            let p = t.mul(sm, lg);
            t.sum(p)
        });
        out.push(("softmax_log", rep));
    }

    // layer norm
    {
        let mut store = ParamStore::new();
        let g = store.add("g", &[6], Init::Ones, &mut r);
        let b = store.add("b", &[6], Init::Uniform(0.2), &mut r);
        let x = Tensor::uniform(&[3, 6], -1.0, 1.0, &mut r);
        let rep = check_gradients(&mut store, usize::MAX, |t, s| {
            let xv = t.input(x.clone());
            let gv = t.param(s, g);
            let bv = t.param(s, b);
            let n = t.layer_norm(xv, gv, bv);
            let sq = t.mul(n, n);
            t.sum(sq)
        });
        out.push(("layer_norm", rep));
    }

    // strided and dilated convolution
    {
        let mut store = ParamStore::new();
        let k = store.add("k", &[2, 3, 3, 3], Init::Xavier, &mut r);
        let b = store.add("b", &[2], Init::Uniform(0.2), &mut r);
        let x = Tensor::uniform(&[3, 9, 9], -1.0, 1.0, &mut r);
        let rep = check_gradients(&mut store, 24, |t, s| {
            let xv = t.input(x.clone());
            let kv = t.param(s, k);
            let bv = t.param(s, b);
            let spec = crate::tensor::math::ConvSpec { stride: 2, pad: 1, dilation: 2 };
            let c = t.conv2d(xv, kv, Some(bv), spec);
            let sq = t.mul(c, c);
            t.sum(sq)
        });
        out.push(("conv2d_strided_dilated", rep));
    }

    // single attention block
    {
        let mut store = ParamStore::new();
        let mha = crate::attention::MhaParams::new(&mut store, &mut r, "mha", 4, 2);
        let q = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
        let kv = Tensor::uniform(&[5, 4], -1.0, 1.0, &mut r);
        let rep = check_gradients(&mut store, 16, |t, s| {
            let qv = t.input(q.clone());
            let kvv = t.input(kv.clone());
            let o = crate::attention::mha(t, s, &mha, qv, kvv, kvv);
            let sq = t.mul(o.out, o.out);
            t.sum(sq)
        });
        out.push(("multi_head_attention", rep));
    }

    // bilinear resize
    {
        let mut store = ParamStore::new();
        let w = store.add("w", &[2, 4, 4], Init::Xavier, &mut r);
        let rep = check_gradients(&mut store, usize::MAX, |t, s| {
            let wv = t.param(s, w);
            let u = t.bilinear_resize(wv, 8, 8);
            let sq = t.mul(u, u);
            t.sum(sq)
        });
        out.push(("bilinear_resize", rep));
    }

    // giou loss on a small box set
    {
        let mut store = ParamStore::new();
        let raw = store.add("raw", &[4, 4], Init::Uniform(0.8), &mut r);
        let gt = crate::heads::BBoxN::new(0.5, 0.5, 0.3, 0.4);
        let rep = check_gradients(&mut store, usize::MAX, |t, s| {
            let rv = t.param(s, raw);
            let boxes = t.sigmoid(rv);
            let (l, _) = crate::losses::reg_loss(t, boxes, &gt, &[0, 2, 3]);
            l
        });
        out.push(("box_regression_loss", rep));
    }

    // classification loss
    {
        let mut store = ParamStore::new();
        let raw = store.add("raw", &[6, 2], Init::Xavier, &mut r);
        let labels = vec![true, false, false, true, false, false];
        let rep = check_gradients(&mut store, usize::MAX, |t, s| {
            let rv = t.param(s, raw);
            let p = t.softmax(rv);
            let fg = t.col_slice(p, 0, 1);
            crate::losses::cls_loss(t, fg, &labels)
        });
        out.push(("classification_loss", rep));
    }

    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn results_round_trip() {
        let outs = vec![
            StepOut { bbox: PixBox::from_xywh(10.0, 20.0, 30.0, 40.0), score: 0.9, iou_pred: 0.8, mask: None },
            StepOut { bbox: PixBox::from_xywh(11.5, 21.5, 29.0, 41.0), score: 0.7, iou_pred: 0.6, mask: None },
        ];
        let dir = std::env::temp_dir().join("fusetrack_cli");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("results.csv");
        write_results(&p, &outs).unwrap();
        let back = read_results(&p).unwrap();
        assert_eq!(back.len(), 2);
        let (b, s, q) = &back[0];
        assert!((b.xywh().0 - 10.0).abs() < 1e-9);
        assert!((b.xywh().3 - 40.0).abs() < 1e-9);
        assert!((s - 0.9).abs() < 1e-3);
        assert!((q - 0.8).abs() < 1e-3);
    }

    #[test]
    fn results_reader_rejects_malformed_lines() {
        let dir = std::env::temp_dir().join("fusetrack_cli");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.csv");
        std::fs::write(&p, "1,2,3\n").unwrap();
        assert!(read_results(&p).is_err());
        std::fs::write(&p, "1,2,3,x,5,6\n").unwrap();
        assert!(read_results(&p).is_err());
    }

    #[test]
    fn checkpoint_shape_inference_builds_matching_models() {
        let dir = std::env::temp_dir().join("fusetrack_cli");
        std::fs::create_dir_all(&dir).unwrap();
        let profile = Profile::mini();

        let mut store = ParamStore::new();
        let mut r = rng::stream(&[rng::TAG_INIT, 5]);
        let _ = CorrNet::new(&mut store, &mut r, profile.clone());
        let p = dir.join("corr.ttk");
        checkpoint::save(&store, &p).unwrap();
        let (_, model) = model_for_checkpoint(profile.clone(), &p).unwrap();
        assert!(matches!(model, Model::Corr(_)));

        let mut store2 = ParamStore::new();
        let mut r2 = rng::stream(&[rng::TAG_INIT, 6]);
        let _ = TrackNet::new(&mut store2, &mut r2, profile.clone(), Some(SegMode::Full));
        let p2 = dir.join("seg.ttk");
        checkpoint::save(&store2, &p2).unwrap();
        let (store_back, model2) = model_for_checkpoint(profile, &p2).unwrap();
        assert!(matches!(model2, Model::Attn(_)));
        assert!(store_back.lookup("seg.mask_head.w").is_some());
    }

    #[test]
    fn gradcheck_battery_is_clean() {
        for (name, rep) in gradcheck_battery(1) {
            assert!(rep.ok(), "{name}: {:?}", rep.failures.first());
            assert!(rep.max_rel_err < 1e-5, "{name}: {}", rep.max_rel_err);
        }
    }

    #[test]
    fn params_counts_the_fusion_stack() {
        let mut p6 = Profile::paper();
        p6.n_layers = 6;
        let mut p4 = Profile::paper();
        p4.n_layers = 4;
        let count = |profile: Profile| -> usize {
            let mut store = ParamStore::new();
            let mut r = rng::stream(&[rng::TAG_INIT, 0]);
            let _ = TrackNet::new(&mut store, &mut r, profile, None);
            store
                .ids()
                .filter(|&id| store.name(id).starts_with("fusion."))
                .map(|id| store.value(id).numel())
                .sum()
        };
        let delta = count(p6) as f64 - count(p4) as f64;
        assert!((delta - 6.3e6).abs() / 6.3e6 < 0.02, "delta {delta}");
    }
}
