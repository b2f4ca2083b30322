//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines come out in order.
//! Exits nonzero if any criterion fails, except those listed in `KNOWN`,
//! which are reported as FAIL with the reason and do not fail the build.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kinet::akg::{edge_mask, normalize_graph, reason, relation_scores, Activation, RelationVars};
use kinet::autodiff::Tape;
use kinet::cbi::{cbi_forward, register_params};
use kinet::checkpoint::Checkpoint;
use kinet::distill::{human_loss, scene_loss, BinaryMask, FileTeacher, LABEL_MANIFEST};
use kinet::netcore::{build_model, ForwardOptions, Model, ModelConfig};
use kinet::params::{Mode, ParamStore, Session};
use kinet::pipeline::{inference_views, Dataset, FrameSpec, MANIFEST, VIEWS_PER_SEGMENT};
use kinet::trainer::{
    lr_at, metrics_csv, sgd_step, total_loss, train, video_scores, window_groups, EvalOptions, LossWeights, OptimState,
    Schedule, TrainOptions,
};
use kinet::Tensor;

const KINET: &str = env!("CARGO_BIN_EXE_kinet");

/// Criteria that cannot pass as literally stated, with the reason.
const KNOWN: &[(u32, &str)] = &[(
    9,
    "the stated second iterate 0.71 contradicts the stated update rule, which gives 1 - 0.1*(0.9 + 0.9) - 0.1 = 0.72",
)];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn kinet(args: &[&str]) -> Output {
    Command::new(KINET).args(args).output().expect("spawn kinet")
}

fn ok(out: &Output) -> bool {
    out.status.success()
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn gradient_correctness() -> Verdict {
    let t = Instant::now();
    let out = kinet(&["gradcheck", "--target", "all"]);
    let elapsed = t.elapsed();
    let text = String::from_utf8_lossy(&out.stdout);
    let expected = [
        "cbi",
        "akg/relation_dot",
        "akg/relation_embedded_dot",
        "akg/relation_concat",
        "akg/normalization",
        "akg/gcn",
        "losses",
        "model",
    ];
    let mut worst: f64 = 0.0;
    let mut names = Vec::new();
    for line in text.lines() {
        let mut f = line.split_whitespace();
        let (Some(status), Some(name)) = (f.next(), f.next()) else {
            continue;
        };
        names.push(name.to_string());
        if status != "PASS" {
            return verdict(false, line.to_string());
        }
        let rel = line
            .split_whitespace()
            .find_map(|w| w.strip_prefix("max_rel_error="))
            .and_then(|v| v.parse::<f64>().ok())
            .unwrap_or(f64::INFINITY);
        worst = worst.max(rel);
    }
    let pass = ok(&out) && names == expected && worst <= 1e-4 && elapsed <= Duration::from_secs(120);
    verdict(
        pass,
        format!(
            "{} subjects, max rel error {worst:.2e}, {:.1}s",
            names.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn softmax_oracle(row: &[f64], active: &[bool]) -> Vec<f64> {
    let m = row
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = row
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .map(|(v, _)| (v - m).exp())
        .sum();
    row.iter()
        .zip(active)
        .map(|(v, &a)| if a { (v - m).exp() / denom } else { 0.0 })
        .collect()
}

fn akg_normalization() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_sum: f64 = 0.0;
    let mut masked_nonzero = 0usize;
    for _ in 0..1000 {
        let n_seg = rng.random_range(1..=4);
        let d = rng.random_range(2..=16);
        let mask = edge_mask(n_seg);
        let n = 3 * n_seg;
        let mut t = Tape::new();
        let x = t.constant(uniform(&mut rng, &[1, n, d], -2.0, 2.0));
        let s = relation_scores(&mut t, x, &RelationVars::dot()).unwrap();
        let g = normalize_graph(&mut t, s, &mask).unwrap();
        let g = t.value(g);
        for a in 0..n {
            let sum: f64 = (0..n).map(|b| g.at(&[0, a, b])).sum();
            worst_sum = worst_sum.max((sum - 1.0).abs());
            masked_nonzero += (0..n).filter(|&b| !mask.get(a, b) && g.at(&[0, a, b]) != 0.0).count();
        }
    }
    // single segment: x_act = (1,0), x_scn = (0,1), x_hum = (1,1)
    let xs = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    let mask = edge_mask(1);
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(&[1, 3, 2], xs.concat()).unwrap());
    let s = relation_scores(&mut t, x, &RelationVars::dot()).unwrap();
    let g = normalize_graph(&mut t, s, &mask).unwrap();
    let mut example_err: f64 = 0.0;
    for a in 0..3 {
        let row: Vec<f64> = (0..3).map(|b| xs[a][0] * xs[b][0] + xs[a][1] * xs[b][1]).collect();
        let oracle = softmax_oracle(&row, &(0..3).map(|b| mask.get(a, b)).collect::<Vec<_>>());
        for b in 0..3 {
            example_err = example_err.max((t.value(g).at(&[0, a, b]) - oracle[b]).abs());
        }
    }
    let scene_row = [t.value(g).at(&[0, 1, 0]), t.value(g).at(&[0, 1, 1])];
    let literal = (scene_row[0] - 0.2689).abs() < 1e-4 && (scene_row[1] - 0.7311).abs() < 1e-4;
    verdict(
        worst_sum <= 1e-6 && masked_nonzero == 0 && example_err <= 1e-4 && literal,
        format!(
            "1000 instances: max |row sum - 1| {worst_sum:.1e}, {masked_nonzero} nonzero masked entries; \
             example rows ({:.4}, {:.4}), oracle error {example_err:.1e}",
            scene_row[0], scene_row[1]
        ),
    )
}

fn blocked_information() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut reachable: f64 = 0.0;
    for &(n_seg, d) in &[(1usize, 4usize), (2, 5), (3, 8)] {
        let n = 3 * n_seg;
        let x0 = uniform(&mut rng, &[1, n, d], -1.0, 1.0);
        let w = uniform(&mut rng, &[d, d], -1.0, 1.0);
        let z_of = |x: &Tensor<f64>| -> Tensor<f64> {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.constant(w.clone());
            let out = reason(
                &mut t,
                xv,
                &RelationVars::dot(),
                &edge_mask(n_seg),
                wv,
                Activation::Identity,
            )
            .unwrap();
            t.value(out.z).clone()
        };
        let eps = 1e-5;
        let (scene, human) = (n_seg..2 * n_seg, 2 * n_seg..3 * n_seg);
        for node in 0..n {
            for k in 0..d {
                let (mut xp, mut xm) = (x0.clone(), x0.clone());
                xp.data_mut()[node * d + k] += eps;
                xm.data_mut()[node * d + k] -= eps;
                let (zp, zm) = (z_of(&xp), z_of(&xm));
                let watched = if scene.contains(&node) {
                    human.clone()
                } else if human.contains(&node) {
                    scene.clone()
                } else {
                    0..n_seg
                };
                for row in watched {
                    for c in 0..d {
                        let jac = (zp.at(&[0, row, c]) - zm.at(&[0, row, c])) / (2.0 * eps);
                        if node < n_seg {
                            reachable = reachable.max(jac.abs());
                        } else {
                            worst = worst.max(jac.abs());
                        }
                    }
                }
            }
        }
    }
    verdict(
        worst <= 1e-8 && reachable > 1e-3,
        format!("max |dZ[human]/dX[scene]|, |dZ[scene]/dX[human]| = {worst:.1e}; action-to-action block reaches {reachable:.2}"),
    )
}

fn cbi_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut exact, mut shapes) = (0, 0);
    for _ in 0..100 {
        let shape = [
            rng.random_range(1..=3),
            rng.random_range(1..=8),
            rng.random_range(1..=7),
            rng.random_range(1..=7),
        ];
        let mut store = ParamStore::<f64>::new();
        register_params(&mut store, "cbi", shape[1]).unwrap();
        let mode = if rng.random_bool(0.5) { Mode::Train } else { Mode::Eval };
        let mut s = Session::new(&store, mode);
        let a0 = uniform(&mut rng, &shape, -3.0, 3.0);
        let a = s.tape.constant(a0.clone());
        let zero = s.tape.constant(Tensor::zeros(&shape));
        let out = cbi_forward(&mut s, "cbi", a, zero, zero).unwrap();
        exact += usize::from(s.tape.value(out) == &a0);
        let sc = s.tape.constant(uniform(&mut rng, &shape, -1.0, 1.0));
        let hu = s.tape.constant(uniform(&mut rng, &shape, -1.0, 1.0));
        let out = cbi_forward(&mut s, "cbi", a, sc, hu).unwrap();
        shapes += usize::from(s.tape.shape(out) == shape);
    }
    verdict(
        exact == 100 && shapes == 100,
        format!("{exact}/100 exact pass-through, {shapes}/100 shapes preserved"),
    )
}

fn baseline_reduction(data: &Path) -> Verdict {
    let dataset = Dataset::open(&data.join(MANIFEST)).unwrap();
    let cfg = ModelConfig {
        cbi_attach: vec![],
        akg: false,
        ..ModelConfig::default()
    };
    let weights = LossWeights {
        lambda_action: 1.0,
        lambda_human: 0.0,
        lambda_scene: 0.0,
    };
    let opts = TrainOptions {
        epochs: 3,
        batch_size: 8,
        momentum: 0.9,
        weight_decay: 1e-5,
        schedule: Schedule::proportional(0.005, 3, &[0.5]),
        weights,
        seed: 11,
        base_hw: [64, 80],
        stop_at_top1: None,
    };
    let full = build_model::<f32>(&cfg, 11).unwrap();
    let base = Model::<f32>::tsn_baseline(&cfg, 11).unwrap();
    let a = train(full.clone(), &dataset, None, &opts, None, |_| {}).unwrap();
    let b = train(base, &dataset, None, &opts, None, |_| {}).unwrap();
    let (ca, cb) = (metrics_csv(&a.history), metrics_csv(&b.history));
    let same_weights = b
        .model
        .store
        .entries()
        .iter()
        .all(|e| a.model.store.get(&e.name) == Some(&e.tensor));

    // instrumentation: which store entries one training step reads
    let mut s = full.session(Mode::Train);
    let x = s
        .tape
        .constant(Tensor::zeros(&[cfg.n_seg, 3, cfg.input_hw[0], cfg.input_hw[1]]));
    let fwd = full.forward(&mut s, x, weights.forward_options()).unwrap();
    let loss = s.tape.cross_entropy(fwd.action_logits, &[0]).unwrap();
    s.gradients(loss).unwrap();
    let aux_reads: Vec<&str> = s
        .touched()
        .filter(|n| {
            n.starts_with("scene/")
                || n.starts_with("human/")
                || n.starts_with("heads/scene")
                || n.starts_with("heads/human")
        })
        .collect();
    let has_aux = full.store.entries().iter().any(|e| e.name.starts_with("scene/"));
    verdict(
        ca == cb && same_weights && aux_reads.is_empty() && has_aux,
        format!(
            "metrics CSV identical: {}, action-path weights identical: {same_weights}, scene/human reads: {}",
            ca == cb,
            aux_reads.len()
        ),
    )
}

fn overfit(data: &Path, labels: &Path, work: &Path) -> Verdict {
    let out = work.join("overfit");
    let t = Instant::now();
    let run = kinet(&[
        "train",
        "--data",
        p(data),
        "--labels",
        p(labels),
        "--out",
        p(&out),
        "--optim.stop_at_top1",
        "0.95",
        "--skip-eval",
        "--quiet",
    ]);
    let elapsed = t.elapsed();
    if !ok(&run) {
        return verdict(false, String::from_utf8_lossy(&run.stderr).trim().to_string());
    }
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    let epochs = summary["epochs_done"].as_u64().unwrap();
    let top1 = summary["final_train_top1"].as_f64().unwrap();
    verdict(
        top1 >= 0.95 && epochs <= 200 && elapsed <= Duration::from_secs(600),
        format!(
            "train top-1 {top1:.3} after {epochs} epochs, {:.0}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn inference_protocol(data: &Path, checkpoint: &Path) -> Verdict {
    let dataset = Dataset::open(&data.join(MANIFEST)).unwrap();
    let model: Model<f64> = Checkpoint::load(checkpoint).unwrap().model.cast();
    let cfg = model.config().clone();
    let video = &dataset.videos[5];
    let base_hw = [64, 80];
    let eval = EvalOptions::default();
    let (scores, views) = video_scores(&model, video, base_hw, &eval).unwrap();

    // brute force: every (window, view) group through the ordinary forward pass
    let spec = FrameSpec {
        base_hw,
        input_hw: cfg.input_hw,
    };
    let batch = inference_views::<f64>(video, eval.n_eval_seg, &spec).unwrap();
    let plane: usize = batch.frames.shape()[1..].iter().product();
    let groups = window_groups(eval.n_eval_seg, VIEWS_PER_SEGMENT, cfg.n_seg);
    let mut oracle = vec![0.0; cfg.k_action];
    for g in &groups {
        let mut data = Vec::new();
        for &r in g {
            data.extend_from_slice(&batch.frames.data()[r * plane..(r + 1) * plane]);
        }
        let mut s = model.session(Mode::Eval);
        let x = s
            .tape
            .constant(Tensor::new(&[g.len(), 3, cfg.input_hw[0], cfg.input_hw[1]], data).unwrap());
        let out = model.forward(&mut s, x, ForwardOptions::default()).unwrap();
        for (o, v) in oracle.iter_mut().zip(s.tape.value(out.action_logits).data()) {
            *o += v / groups.len() as f64;
        }
    }
    let err = scores
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = oracle.iter().map(|v| v.abs()).fold(0.0, f64::max);

    // window 1: plain mean of per-view predictions
    let one = EvalOptions {
        window: 1,
        ..EvalOptions::default()
    };
    let (scores1, _) = video_scores(&model, video, base_hw, &one).unwrap();
    let pooled = model.pooled_features(batch.frames.clone()).unwrap();
    let per_view = model.classify_pooled(&pooled, 1).unwrap();
    let mut mean = vec![0.0; cfg.k_action];
    for row in per_view.data().chunks(cfg.k_action) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / views as f64;
        }
    }
    verdict(
        views == 250 && groups.len() == 230 && err <= 1e-6 && scores1 == mean,
        format!(
            "{views} views, {} groups, brute-force error {err:.1e} (logit scale {scale:.2}), window=1 exact: {}",
            groups.len(),
            scores1 == mean
        ),
    )
}

fn loss_arithmetic() -> Verdict {
    let total = total_loss(1.0, 2.0, 3.0, &LossWeights::default()).unwrap();
    let mut t = Tape::<f64>::new();
    let logits = t.constant(Tensor::zeros(&[3, 365]));
    let ls = scene_loss(&mut t, logits, &[0, 100, 364]).unwrap();
    let pix = t.constant(Tensor::zeros(&[2, 2, 4, 5]));
    let masks: Vec<BinaryMask> = (0..2)
        .map(|i| BinaryMask::from_fn(4, 5, |y, x| (x + y + i) % 3 == 0))
        .collect();
    let lh = human_loss(&mut t, pix, &masks).unwrap();
    let (ls, lh) = (t.value(ls).data()[0], t.value(lh).data()[0]);
    let pass = total == 1.05 && (ls - 365f64.ln()).abs() <= 1e-4 && (lh - 2f64.ln()).abs() <= 1e-4;
    verdict(
        pass,
        format!(
            "total {total}, uniform scene loss {ls:.6} (ln 365 = {:.6}; the quoted 5.9001 is 2e-4 off), uniform human loss {lh:.6}",
            365f64.ln()
        ),
    )
}

fn optimizer() -> Verdict {
    // f(w) = w²/2 from w = 1, lr 0.1, momentum 0.9, no decay
    let mut store = ParamStore::<f64>::new();
    store
        .insert(
            "w",
            kinet::params::EntryKind::Param,
            Tensor::from_f64(&[1], &[1.0]).unwrap(),
        )
        .unwrap();
    let mut state = OptimState::new(&store, 0.9, 0.0, Schedule::proportional(0.1, 1, &[]));
    let mut seq = Vec::new();
    for _ in 0..2 {
        let w = store.get("w").unwrap().clone();
        sgd_step(&mut store, &[(0, w)], &mut state).unwrap();
        seq.push(store.get("w").unwrap().data()[0]);
    }
    let recurrence = (seq[0] - 0.9).abs() <= 1e-12 && (seq[1] - 0.72).abs() <= 1e-12;
    let literal = (seq[0] - 0.9).abs() <= 1e-12 && (seq[1] - 0.71).abs() <= 1e-12;
    let sched = Schedule {
        base_lr: 0.01,
        milestones: vec![100, 150, 175],
    };
    let lrs: Vec<f64> = [0, 100, 150, 175].iter().map(|&e| lr_at(e, &sched)).collect();
    let lr_ok = lrs
        .iter()
        .zip([0.01, 0.001, 1e-4, 1e-5])
        .all(|(a, b)| (a - b).abs() <= 1e-12 * b);
    verdict(
        literal && lr_ok,
        format!(
            "sequence ({}, {}) vs stated (0.9, 0.71); matches its own recurrence (0.9, 0.72): {recurrence}; lr {lrs:?}",
            seq[0], seq[1]
        ),
    )
}

struct Smoke {
    data: PathBuf,
    labels: PathBuf,
    checkpoint: PathBuf,
    verdict: Verdict,
}

fn smoke(work: &Path) -> Smoke {
    let data = work.join("data");
    let labels = work.join("labels");
    let run = work.join("run");
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("synthdata", vec!["synthdata".into(), "--out".into(), p(&data).into()]),
        (
            "pseudolabel",
            vec![
                "pseudolabel",
                "--data",
                p(&data),
                "--teacher",
                "synthetic",
                "--out",
                p(&labels),
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "train",
            vec![
                "train",
                "--data",
                p(&data),
                "--labels",
                p(&labels),
                "--out",
                p(&run),
                "--optim.epochs",
                "5",
                "--quiet",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "eval",
            vec![
                "eval",
                "--checkpoint",
                p(&run.join("model.ckpt")),
                "--data",
                p(&data),
                "--protocol",
                "fast",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "actmap",
            vec![
                "actmap",
                "--checkpoint",
                p(&run.join("model.ckpt")),
                "--video",
                p(&data.join("videos/c01_v002")),
                "--out",
                p(&work.join("maps")),
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
    ];
    let mut failed = None;
    for (name, args) in &steps {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = kinet(&args);
        if !ok(&out) {
            failed = Some(format!("{name}: {}", String::from_utf8_lossy(&out.stderr).trim()));
            break;
        }
    }
    let labels_ok = FileTeacher::open(&labels.join(LABEL_MANIFEST), 365).is_ok_and(|t| t.len() == 96);
    let maps = std::fs::read_dir(work.join("maps")).map(|d| d.count()).unwrap_or(0);
    let eval_json = std::fs::read(run.join("eval.json"))
        .ok()
        .and_then(|b| serde_json::from_slice::<serde_json::Value>(&b).ok());
    let eval_ok = eval_json
        .as_ref()
        .is_some_and(|v| v["views_per_video"] == 3 && v["top1"].is_f64());
    let pass = failed.is_none() && labels_ok && maps == 9 && eval_ok;
    Smoke {
        checkpoint: run.join("model.ckpt"),
        verdict: verdict(
            pass,
            failed.unwrap_or_else(|| {
                format!("5 commands green; 96 labels: {labels_ok}, {maps} heatmaps, eval report parsed: {eval_ok}")
            }),
        ),
        data,
        labels,
    }
}

fn determinism(smoke: &Smoke, work: &Path) -> Verdict {
    let run_a = work.join("run");
    let run_b = work.join("run_again");
    let out = kinet(&[
        "train",
        "--data",
        p(&smoke.data),
        "--labels",
        p(&smoke.labels),
        "--out",
        p(&run_b),
        "--optim.epochs",
        "5",
        "--skip-eval",
        "--quiet",
    ]);
    let csv_a = std::fs::read(run_a.join("metrics.csv")).unwrap_or_default();
    let csv_b = std::fs::read(run_b.join("metrics.csv")).unwrap_or_default();
    let csv_same = ok(&out) && !csv_a.is_empty() && csv_a == csv_b;
    let ck_a = std::fs::read(run_a.join("model.ckpt")).unwrap_or_default();
    let ck_b = std::fs::read(run_b.join("model.ckpt")).unwrap_or_default();

    let resaved = work.join("resaved.ckpt");
    let round_trip = Checkpoint::load(&smoke.checkpoint)
        .and_then(|c| c.save(&resaved))
        .is_ok()
        && std::fs::read(&resaved).unwrap_or_default() == ck_a;
    verdict(
        csv_same && ck_a == ck_b && round_trip && smoke.verdict.pass,
        format!(
            "metrics CSVs identical: {csv_same}, checkpoints identical: {}, save-load-save identical: {round_trip}; smoke: {}",
            ck_a == ck_b,
            smoke.verdict.detail
        ),
    )
}

fn main() {
    // `cargo test` passes filter arguments; this gate has a single entry point.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let work = tempfile::tempdir().unwrap();
    let smoke_run = smoke(work.path());

    let results: Vec<(u32, &str, Verdict)> = vec![
        (1, "gradient correctness", gradient_correctness()),
        (2, "AKG normalization", akg_normalization()),
        (3, "blocked information", blocked_information()),
        (4, "CBI identity at init", cbi_identity()),
        (5, "baseline reduction", baseline_reduction(&smoke_run.data)),
        (
            6,
            "overfit experiment",
            overfit(&smoke_run.data, &smoke_run.labels, work.path()),
        ),
        (
            7,
            "inference protocol",
            inference_protocol(&smoke_run.data, &smoke_run.checkpoint),
        ),
        (8, "loss arithmetic", loss_arithmetic()),
        (9, "optimizer", optimizer()),
        (10, "determinism and persistence", determinism(&smoke_run, work.path())),
    ];
    let mut unexpected = 0;
    for (id, name, v) in &results {
        let known = KNOWN.iter().find(|(k, _)| k == id);
        println!("{} {id:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            match known {
                Some((_, why)) => println!("        known deviation: {why}"),
                None => unexpected += 1,
            }
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} acceptance criteria failed");
        std::process::exit(1);
    }
}
