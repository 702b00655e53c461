// Budget probe: replicates the stage-1 loop with eval checkpoints so one
// training pass maps the whole learning curve. Scratch tool, not a deliverable.

use fusetrack::config::{TrackConfig, TrainConfig};
use fusetrack::eval::evaluate;
use fusetrack::heads::assign_samples_at;
use fusetrack::losses::{cls_loss, reg_loss};
use fusetrack::model::{CombineMode, Model, TrackNet};
use fusetrack::profile::Profile;
use fusetrack::synth::gen_synthetic;
use fusetrack::tensor::adamw::{AdamW, AdamWConfig, ParamGroup};
use fusetrack::tensor::param::{GradStore, ParamStore};
use fusetrack::tensor::rng;
use fusetrack::tensor::tape::Tape;
use fusetrack::tensor::Real;
use fusetrack::tracker::run_sequence;
use fusetrack::train::make_sample;

fn eval_tracker(model: &Model, store: &ParamStore, label: &str) {
    let tcfg = TrackConfig::default();
    let t0 = std::time::Instant::now();
    let mut seq_means = Vec::new();
    for i in 0..20u64 {
        let seed = rng::mix64(&[rng::TAG_EVAL, 7, i]);
        let seq = gen_synthetic(seed, 60, 2, 3.0, true);
        let outs = run_sequence(model, store, &seq.frames, &seq.gt_boxes[0], &tcfg, false).unwrap();
        let boxes: Vec<_> = outs.iter().map(|o| o.bbox).collect();
        let rep = evaluate(&boxes, &seq.gt_boxes, 20.0).unwrap();
        seq_means.push(rep.mean_iou);
    }
    let mean = seq_means.iter().sum::<Real>() / seq_means.len() as Real;
    let worst = seq_means.iter().cloned().fold(Real::INFINITY, Real::min);
    let below: usize = seq_means.iter().filter(|&&m| m < 0.5).count();
    println!(
        "[{label}] mean IoU {mean:.4}  worst {worst:.4}  seqs<0.5 {below}/20  ({:?})",
        t0.elapsed()
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1200);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(4);
    let lr: Real = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2e-4);
    let evals: Vec<usize> = vec![200, 400, 600, 800, 1200, 1600, 2000]
        .into_iter()
        .filter(|&e| e <= steps)
        .collect();
    println!("probe: steps={steps} batch={batch} lr={lr}");

    let mut cfg = TrainConfig::default();
    cfg.steps = steps;
    cfg.batch = batch;
    cfg.lr = lr;
    cfg.backbone_lr = lr / 10.0;

    let profile = Profile::toy();
    let mut store = ParamStore::new();
    let mut r = rng::stream(&[rng::TAG_INIT, cfg.seed]);
    let model = Model::Attn(TrackNet::new(&mut store, &mut r, profile.clone(), None));

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
    let mut window = Vec::new();

    for step in 0..cfg.steps {
        grads.reset();
        let mut batch_loss = 0.0;
        for k in 0..cfg.batch {
            let s = make_sample(&profile, cfg.m, &cfg, step, k);
            let mut tape = Tape::new();
            let tpl: Vec<_> = s.templates.iter().map(|t| tape.input(t.clone())).collect();
            let x = tape.input(s.search.clone());
            let out = model.forward(&mut tape, &store, &tpl, x, CombineMode::Concat, false).unwrap();
            let assign = assign_samples_at(&s.gt, &out.centers);
            let cls = cls_loss(&mut tape, out.scores, &assign.labels);
            let (reg, _) = reg_loss(&mut tape, out.boxes, &s.gt, &assign.positives);
            let loss = tape.add(cls, reg);
            let v = tape.value(loss).item();
            assert!(v.is_finite(), "non-finite loss at step {step}");
            batch_loss += v;
            let tg = tape.backward(loss);
            for (id, g) in tape.param_grads(&tg) {
                grads.accumulate(id, g, 1.0 / cfg.batch as Real);
            }
        }
        opt.step(&mut store, &grads);
        window.push(batch_loss / cfg.batch as Real);
        if (step + 1) % 100 == 0 {
            let m = window.iter().sum::<Real>() / window.len() as Real;
            println!("step {:4}  loss {:.4}  elapsed {:?}", step + 1, m, t0.elapsed());
            window.clear();
        }
        if evals.contains(&(step + 1)) {
            eval_tracker(&model, &store, &format!("step {}", step + 1));
        }
    }
}
