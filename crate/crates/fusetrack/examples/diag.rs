// Single-frame detection diagnostic: trains stage 1 and reports where the
// quality bottleneck sits (classification vs regression vs collapse).
// Scratch tool, not a deliverable.

use fusetrack::config::TrainConfig;
use fusetrack::heads::assign_samples_at;
use fusetrack::losses::{cls_loss, iou, reg_loss};
use fusetrack::model::{CombineMode, CorrNet, Model, TrackNet};
use fusetrack::profile::Profile;
use fusetrack::tensor::adamw::{AdamW, AdamWConfig, ParamGroup};
use fusetrack::tensor::param::{GradStore, ParamStore};
use fusetrack::tensor::rng;
use fusetrack::tensor::tape::Tape;
use fusetrack::tensor::Real;
use fusetrack::train::make_sample;

fn detect_eval(model: &Model, store: &ParamStore, profile: &Profile, label: &str) {
    let mut hold = TrainConfig::default();
    hold.seed = 777;
    let n = 50;
    let mut iou_best = 0.0;
    let mut iou_oracle = 0.0;
    let mut argmax_in_gt = 0usize;
    let mut centers: Vec<(Real, Real)> = Vec::new();
    let mut score_best_sum = 0.0;
    for i in 0..n {
        let s = make_sample(profile, hold.m, &hold, 1_000_000 + i, 0);
        let mut tape = Tape::new();
        let tpl: Vec<_> = s.templates.iter().map(|t| tape.input(t.clone())).collect();
        let x = tape.input(s.search.clone());
        let out = model.forward(&mut tape, store, &tpl, x, CombineMode::Concat, false).unwrap();
        let scores = tape.value(out.scores).clone();
        let boxes = tape.value(out.boxes).clone();
        let best = scores
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        score_best_sum += scores.data()[best];
        let b_at = |t: usize| {
            let d = &boxes.data()[t * 4..t * 4 + 4];
            fusetrack::heads::BBoxN::new(d[0], d[1], d[2], d[3])
        };
        let pred = b_at(best);
        centers.push((pred.cx, pred.cy));
        iou_best += iou(&pred, &s.gt);
        // token nearest the gt center, regardless of scores
        let oracle = out
            .centers
            .iter()
            .enumerate()
            .min_by(|a, b| {
                let da = (a.1 .0 - s.gt.cx).powi(2) + (a.1 .1 - s.gt.cy).powi(2);
                let db = (b.1 .0 - s.gt.cx).powi(2) + (b.1 .1 - s.gt.cy).powi(2);
                da.partial_cmp(&db).unwrap()
            })
            .unwrap()
            .0;
        iou_oracle += iou(&b_at(oracle), &s.gt);
        let (tx, ty) = out.centers[best];
        if s.gt.contains(tx, ty) {
            argmax_in_gt += 1;
        }
    }
    let nn = n as Real;
    let mcx = centers.iter().map(|c| c.0).sum::<Real>() / nn;
    let mcy = centers.iter().map(|c| c.1).sum::<Real>() / nn;
    let var = centers
        .iter()
        .map(|c| (c.0 - mcx).powi(2) + (c.1 - mcy).powi(2))
        .sum::<Real>()
        / nn;
    println!(
        "[{label}] iou_best {:.3}  iou_oracle {:.3}  argmax_in_gt {}/{}  best_score {:.3}  center_sd {:.4}",
        iou_best / nn,
        iou_oracle / nn,
        argmax_in_gt,
        n,
        score_best_sum / nn,
        var.sqrt()
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(400);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(4);
    let lr: Real = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2e-4);
    let decay_at: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(usize::MAX);
    let corr: bool = args.get(5).map(|s| s == "corr").unwrap_or(false);
    println!("diag: steps={steps} batch={batch} lr={lr} decay_at={decay_at} corr={corr}");

    let mut cfg = TrainConfig::default();
    cfg.steps = steps;
    cfg.batch = batch;
    cfg.lr = lr;
    cfg.backbone_lr = lr / 10.0;

    let profile = Profile::toy();
    let mut store = ParamStore::new();
    let mut r = rng::stream(&[rng::TAG_INIT, cfg.seed]);
    let model = if corr {
        Model::Corr(CorrNet::new(&mut store, &mut r, profile.clone()))
    } else {
        Model::Attn(TrackNet::new(&mut store, &mut r, profile.clone(), None))
    };

    let opt_cfg = AdamWConfig {
        groups: vec![
            ParamGroup { prefix: String::new(), lr: cfg.lr, weight_decay: cfg.weight_decay },
            ParamGroup { prefix: "backbone".into(), lr: cfg.backbone_lr, weight_decay: cfg.weight_decay },
        ],
        ..Default::default()
    };
    let mut opt = AdamW::new(opt_cfg, &store);
    let mut grads = GradStore::new(&store);
    let t0 = std::time::Instant::now();
    let mut cls_acc = 0.0;
    let mut reg_acc = 0.0;

    detect_eval(&model, &store, &profile, "step 0");
    for step in 0..cfg.steps {
        grads.reset();
        for k in 0..cfg.batch {
            let s = make_sample(&profile, cfg.m, &cfg, step, k);
            let mut tape = Tape::new();
            let tpl: Vec<_> = s.templates.iter().map(|t| tape.input(t.clone())).collect();
            let x = tape.input(s.search.clone());
            let out = model.forward(&mut tape, &store, &tpl, x, CombineMode::Concat, false).unwrap();
            let assign = assign_samples_at(&s.gt, &out.centers);
            let cls = cls_loss(&mut tape, out.scores, &assign.labels);
            let (reg, _) = reg_loss(&mut tape, out.boxes, &s.gt, &assign.positives);
            cls_acc += tape.value(cls).item();
            reg_acc += tape.value(reg).item();
            let loss = tape.add(cls, reg);
            let tg = tape.backward(loss);
            for (id, g) in tape.param_grads(&tg) {
                grads.accumulate(id, g, 1.0 / cfg.batch as Real);
            }
        }
        opt.step(&mut store, &grads);
        if step + 1 == decay_at {
            opt.scale_lr(0.1);
            println!("lr decayed x0.1 at step {}", step + 1);
        }
        if (step + 1) % 100 == 0 {
            let n = (100 * cfg.batch) as Real;
            println!(
                "step {:4}  cls {:.4}  reg {:.4}  elapsed {:?}",
                step + 1,
                cls_acc / n,
                reg_acc / n,
                t0.elapsed()
            );
            cls_acc = 0.0;
            reg_acc = 0.0;
            detect_eval(&model, &store, &profile, &format!("step {}", step + 1));
        }
    }
}
