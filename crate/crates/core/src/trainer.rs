//! Joint objective, optimizer, schedule, training loop and evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::distill::{self, BinaryMask, FileTeacher};
use crate::error::{Error, Result};
use crate::netcore::{ForwardOptions, Model, PooledFeatures};
use crate::params::{apply_bn_updates, keyed_rng, EntryKind, Mode, ParamStore, BN_MOMENTUM};
use crate::pipeline::{
    self, crop_mask, load_frame, sample_train_segments, train_augment, Dataset, FrameSpec, VideoRecord, EVAL_SEGMENTS,
    VIEWS_PER_SEGMENT,
};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_action: f64,
    pub lambda_human: f64,
    pub lambda_scene: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_action: 1.0,
            lambda_human: 0.01,
            lambda_scene: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_action > 0.0 && self.lambda_action.is_finite()) {
            return Err(Error::config("optim.lambda_action", "must be positive"));
        }
        for (f, v) in [
            ("optim.lambda_human", self.lambda_human),
            ("optim.lambda_scene", self.lambda_scene),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(f, "must be non-negative"));
            }
        }
        Ok(())
    }

    /// Which auxiliary heads contribute to the objective.
    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            scene_head: self.lambda_scene > 0.0,
            human_head: self.lambda_human > 0.0,
        }
    }
}

/// `λ1·l_action + λ2·l_human + λ3·l_scene`.
pub fn total_loss(l_action: f64, l_human: f64, l_scene: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("action", l_action), ("human", l_human), ("scene", l_scene)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is {v}")));
        }
    }
    Ok(w.lambda_action * l_action + w.lambda_human * l_human + w.lambda_scene * l_scene)
}

/// Step schedule: the base rate drops by 10× at each milestone epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
}

impl Schedule {
    /// Milestones at the given fractions of `epochs`.
    pub fn proportional(base_lr: f64, epochs: usize, fractions: &[f64]) -> Self {
        Schedule {
            base_lr,
            milestones: fractions.iter().map(|f| (f * epochs as f64).round() as usize).collect(),
        }
    }
}

pub fn lr_at(epoch: usize, schedule: &Schedule) -> f64 {
    let passed = schedule.milestones.iter().filter(|&&m| epoch >= m).count();
    schedule.base_lr * 0.1f64.powi(passed as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    /// One velocity per trainable entry of the store, in store order.
    pub velocity: Vec<Tensor<T>>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64, schedule: Schedule) -> Self {
        OptimState {
            velocity: store
                .param_indices()
                .into_iter()
                .map(|i| Tensor::zeros(store.entry(i).tensor.shape()))
                .collect(),
            lr: schedule.base_lr,
            momentum,
            weight_decay,
            schedule,
        }
    }
}

/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v` for every trainable entry.
/// `grads` pairs store indices with gradients; missing entries count as
/// zero gradient.
pub fn sgd_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[(usize, Tensor<T>)],
    state: &mut OptimState<T>,
) -> Result<()> {
    let params = store.param_indices();
    if state.velocity.len() != params.len() {
        return Err(Error::shape(
            "optimizer velocities",
            &[params.len()],
            &[state.velocity.len()],
        ));
    }
    let mu = T::cast_from(state.momentum);
    let wd = T::cast_from(state.weight_decay);
    let lr = T::cast_from(state.lr);
    for (k, &i) in params.iter().enumerate() {
        let grad = grads.iter().find(|(j, _)| *j == i).map(|(_, g)| g);
        let entry = store.entry_mut(i);
        let v = &mut state.velocity[k];
        if v.shape() != entry.tensor.shape() {
            return Err(Error::shape(
                format!("velocity of {}", entry.name),
                entry.tensor.shape(),
                v.shape(),
            ));
        }
        if let Some(g) = grad {
            if g.shape() != entry.tensor.shape() {
                return Err(Error::shape(
                    format!("gradient of {}", entry.name),
                    entry.tensor.shape(),
                    g.shape(),
                ));
            }
        }
        let w = entry.tensor.data_mut();
        for (idx, (wv, vv)) in w.iter_mut().zip(v.data_mut()).enumerate() {
            let gv = grad.map_or(T::zero(), |g| g.data()[idx]);
            *vv = mu * *vv + (gv + wd * *wv);
            *wv = *wv - lr * *vv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_action: f64,
    pub loss_human: f64,
    pub loss_scene: f64,
    pub train_top1: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,loss_total,loss_action,loss_human,loss_scene,train_top1";

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in history {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            m.epoch, m.lr, m.loss_total, m.loss_action, m.loss_human, m.loss_scene, m.train_top1
        )
        .expect("writing to a string");
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub weights: LossWeights,
    pub seed: u64,
    pub base_hw: [usize; 2],
    /// Stop after the first epoch whose train top-1 reaches this value.
    pub stop_at_top1: Option<f64>,
}

pub struct TrainOutcome<T: Scalar> {
    pub model: Model<T>,
    pub optim: OptimState<T>,
    pub history: Vec<EpochMetrics>,
    /// Epochs completed in total, including any resumed ones.
    pub epochs_done: usize,
}

/// Pseudo-labels of one training batch, aligned with its frames.
struct AuxTargets {
    scene: Vec<usize>,
    masks: Vec<BinaryMask>,
}

struct Batch<T> {
    frames: Tensor<T>,
    labels: Vec<usize>,
    aux: Option<AuxTargets>,
}

fn missing_labels(video: &VideoRecord, seg: usize) -> Error {
    Error::Data(format!(
        "missing pseudo-label for video {} segment {seg}; run `kinet pseudolabel` for this dataset first",
        video.video_id
    ))
}

fn load_batch<T: Scalar>(
    videos: &[&VideoRecord],
    model: &Model<T>,
    labels: Option<&FileTeacher>,
    opts: &TrainOptions,
    epoch: usize,
    need_aux: bool,
) -> Result<Batch<T>> {
    let cfg = model.config();
    let spec = FrameSpec {
        base_hw: opts.base_hw,
        input_hw: cfg.input_hw,
    };
    let [fh, fw] = cfg.feature_hw();
    let mut data = Vec::new();
    let mut aux = need_aux.then(|| AuxTargets {
        scene: Vec::new(),
        masks: Vec::new(),
    });
    for v in videos {
        let mut rng = keyed_rng(opts.seed, &v.video_id, epoch as u64);
        let idx = sample_train_segments(v, cfg.n_seg, &mut rng)?;
        for (seg, &f) in idx.iter().enumerate() {
            let frame = load_frame(&v.frame_paths[f])?;
            let (t, geo) = train_augment::<T>(&frame, &spec, &mut rng);
            data.extend_from_slice(t.data());
            if let Some(aux) = aux.as_mut() {
                let rec = labels
                    .and_then(|l| l.get(&v.video_id, seg))
                    .ok_or_else(|| missing_labels(v, seg))?;
                if rec.scene_class >= cfg.k_scene {
                    return Err(Error::Validation(format!(
                        "video {} segment {seg}: scene class {} out of range for {} classes",
                        v.video_id, rec.scene_class, cfg.k_scene
                    )));
                }
                aux.scene.push(rec.scene_class);
                aux.masks.push(crop_mask(&rec.human_mask, &spec, &geo, fh, fw));
            }
        }
    }
    let [h, w] = cfg.input_hw;
    Ok(Batch {
        frames: Tensor::new(&[videos.len() * cfg.n_seg, 3, h, w], data)?,
        labels: videos.iter().map(|v| v.action_label).collect(),
        aux,
    })
}

/// Row-wise arg-max of `[B, K]` logits (first maximum wins).
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Checks that every video has labels for every segment before any work.
pub fn check_label_coverage(dataset: &Dataset, labels: Option<&FileTeacher>, n_seg: usize) -> Result<()> {
    for v in &dataset.videos {
        for seg in 0..n_seg {
            if labels.and_then(|l| l.get(&v.video_id, seg)).is_none() {
                return Err(missing_labels(v, seg));
            }
        }
    }
    Ok(())
}

struct StepLosses {
    total: f64,
    action: f64,
    human: f64,
    scene: f64,
    correct: usize,
}

fn train_step<T: Scalar>(
    model: &mut Model<T>,
    optim: &mut OptimState<T>,
    batch: Batch<T>,
    weights: &LossWeights,
) -> Result<StepLosses> {
    let opts = weights.forward_options();
    let (grads, updates, losses) = {
        let mut s = model.session(Mode::Train);
        let x = s.tape.constant(batch.frames);
        let out = model.forward(&mut s, x, opts)?;
        let preds = argmax_rows(s.tape.value(out.action_logits));
        let correct = preds.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        let la = s.tape.cross_entropy(out.action_logits, &batch.labels)?;
        let mut terms: Vec<(Var, T)> = vec![(la, T::cast_from(weights.lambda_action))];
        let (mut lh, mut ls) = (None, None);
        if let Some(aux) = &batch.aux {
            if let Some(h) = out.human_logits {
                let v = distill::human_loss(&mut s.tape, h, &aux.masks)?;
                terms.push((v, T::cast_from(weights.lambda_human)));
                lh = Some(v);
            }
            if let Some(sc) = out.scene_logits {
                let v = distill::scene_loss(&mut s.tape, sc, &aux.scene)?;
                terms.push((v, T::cast_from(weights.lambda_scene)));
                ls = Some(v);
            }
        }
        let value = |v: Option<Var>| v.map_or(0.0, |v| s.tape.value(v).item().as_f64());
        let (a, h, sc) = (s.tape.value(la).item().as_f64(), value(lh), value(ls));
        total_loss(a, h, sc, weights)?;
        let total = s.tape.weighted_sum(&terms)?;
        let t = s.tape.value(total).item().as_f64();
        if !t.is_finite() {
            return Err(Error::Numeric(format!("total loss is {t}")));
        }
        let grads = s.gradients(total)?;
        if let Some((i, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::Numeric(format!(
                "gradient of {} is not finite",
                model.store.entry(*i).name
            )));
        }
        let losses = StepLosses {
            total: t,
            action: a,
            human: h,
            scene: sc,
            correct,
        };
        (grads, s.into_bn_updates(), losses)
    };
    sgd_step(&mut model.store, &grads, optim)?;
    apply_bn_updates(&mut model.store, &updates, BN_MOMENTUM);
    Ok(losses)
}

/// Runs epochs `start_epoch..opts.epochs`. Deterministic given the seed:
/// batch order and every augmentation draw come from streams keyed by
/// `(seed, video_id, epoch)`.
pub fn train<T: Scalar>(
    mut model: Model<T>,
    dataset: &Dataset,
    labels: Option<&FileTeacher>,
    opts: &TrainOptions,
    resume: Option<(OptimState<T>, usize)>,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome<T>> {
    opts.weights.validate()?;
    if opts.batch_size == 0 {
        return Err(Error::config("data.batch_size", "must be at least 1"));
    }
    dataset.check_labels(model.config().k_action)?;
    let fwd = opts.weights.forward_options();
    let need_aux = fwd.scene_head || fwd.human_head;
    if need_aux {
        check_label_coverage(dataset, labels, model.config().n_seg)?;
    }
    let (mut optim, start) = match resume {
        Some((o, e)) => (o, e),
        None => (
            OptimState::new(&model.store, opts.momentum, opts.weight_decay, opts.schedule.clone()),
            0,
        ),
    };
    let mut history = Vec::new();
    let mut done = start;
    for epoch in start..opts.epochs {
        optim.lr = lr_at(epoch, &optim.schedule);
        let mut order: Vec<&VideoRecord> = dataset.videos.iter().collect();
        order.shuffle(&mut keyed_rng(opts.seed, "epoch-order", epoch as u64));
        let (mut sums, mut correct, mut seen) = ([0.0f64; 4], 0usize, 0usize);
        for chunk in order.chunks(opts.batch_size) {
            let batch = load_batch(chunk, &model, labels, opts, epoch, need_aux)?;
            let l = train_step(&mut model, &mut optim, batch, &opts.weights)?;
            let n = chunk.len() as f64;
            for (acc, v) in sums.iter_mut().zip([l.total, l.action, l.human, l.scene]) {
                *acc += v * n;
            }
            correct += l.correct;
            seen += chunk.len();
        }
        let n = seen as f64;
        let m = EpochMetrics {
            epoch,
            lr: optim.lr,
            loss_total: sums[0] / n,
            loss_action: sums[1] / n,
            loss_human: sums[2] / n,
            loss_scene: sums[3] / n,
            train_top1: correct as f64 / n,
        };
        progress(&m);
        let stop = opts.stop_at_top1.is_some_and(|t| m.train_top1 >= t);
        history.push(m);
        done = epoch + 1;
        if stop {
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        optim,
        history,
        epochs_done: done,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// 25 segments × 10 views with sliding-window consensus.
    Full250,
    /// One center crop per training segment.
    Fast,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub protocol: Protocol,
    pub n_eval_seg: usize,
    pub window: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            protocol: Protocol::Full250,
            n_eval_seg: EVAL_SEGMENTS,
            window: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub top1: f64,
    pub top5: f64,
    pub videos: usize,
    pub views_per_video: usize,
}

/// Frames per forward chunk during evaluation.
const EVAL_CHUNK: usize = 50;

fn pooled_in_chunks<T: Scalar>(model: &Model<T>, frames: &Tensor<T>) -> Result<PooledFeatures<T>> {
    let n = frames.shape()[0];
    let plane: usize = frames.shape()[1..].iter().product();
    let mut parts: Vec<PooledFeatures<T>> = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let len = EVAL_CHUNK.min(n - start);
        let mut shape = frames.shape().to_vec();
        shape[0] = len;
        let chunk = Tensor::new(&shape, frames.data()[start * plane..(start + len) * plane].to_vec())?;
        parts.push(model.pooled_features(chunk)?);
    }
    let cat = |get: &dyn Fn(&PooledFeatures<T>) -> Option<&Tensor<T>>| -> Result<Option<Tensor<T>>> {
        if get(&parts[0]).is_none() {
            return Ok(None);
        }
        let d = get(&parts[0]).expect("checked").shape()[1];
        let mut data = Vec::with_capacity(n * d);
        for p in &parts {
            data.extend_from_slice(get(p).expect("all chunks alike").data());
        }
        Ok(Some(Tensor::new(&[n, d], data)?))
    };
    Ok(PooledFeatures {
        action: cat(&|p| Some(&p.action))?.expect("action features"),
        scene: cat(&|p| p.scene.as_ref())?,
        human: cat(&|p| p.human.as_ref())?,
    })
}

/// Gathers rows of pooled features in the given order.
fn gather<T: Scalar>(p: &PooledFeatures<T>, rows: &[usize]) -> Result<PooledFeatures<T>> {
    let pick = |t: &Tensor<T>| -> Result<Tensor<T>> {
        let d = t.shape()[1];
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
        }
        Tensor::new(&[rows.len(), d], data)
    };
    Ok(PooledFeatures {
        action: pick(&p.action)?,
        scene: p.scene.as_ref().map(pick).transpose()?,
        human: p.human.as_ref().map(pick).transpose()?,
    })
}

/// Frame rows of every (window, view) group of the multi-view protocol,
/// window-major then view: group `(w, j)` holds segments `w..w+window` at
/// view `j`.
pub fn window_groups(n_seg: usize, n_view: usize, window: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for w in 0..=n_seg - window {
        for j in 0..n_view {
            out.push((w..w + window).map(|s| s * n_view + j).collect());
        }
    }
    out
}

/// Video-level class scores and the number of views consumed.
pub fn video_scores<T: Scalar>(
    model: &Model<T>,
    video: &VideoRecord,
    base_hw: [usize; 2],
    eval: &EvalOptions,
) -> Result<(Vec<f64>, usize)> {
    let cfg = model.config();
    let spec = FrameSpec {
        base_hw,
        input_hw: cfg.input_hw,
    };
    match eval.protocol {
        Protocol::Fast => {
            let views = pipeline::fast_views::<T>(video, cfg.n_seg, &spec)?;
            let pooled = pooled_in_chunks(model, &views.frames)?;
            let logits = model.classify_pooled(&pooled, cfg.n_seg)?;
            Ok((logits.to_f64_vec(), views.len()))
        }
        Protocol::Full250 => {
            if eval.window == 0 || eval.window > eval.n_eval_seg {
                return Err(Error::config(
                    "eval.window",
                    format!("window {} must be in 1..={}", eval.window, eval.n_eval_seg),
                ));
            }
            let views = pipeline::inference_views::<T>(video, eval.n_eval_seg, &spec)?;
            let pooled = pooled_in_chunks(model, &views.frames)?;
            let groups = window_groups(eval.n_eval_seg, VIEWS_PER_SEGMENT, eval.window);
            let rows: Vec<usize> = groups.concat();
            let logits = model.classify_pooled(&gather(&pooled, &rows)?, eval.window)?;
            let k = cfg.k_action;
            let mut scores = vec![0.0; k];
            for row in logits.data().chunks(k) {
                for (s, v) in scores.iter_mut().zip(row) {
                    *s += v.as_f64() / groups.len() as f64;
                }
            }
            Ok((scores, views.len()))
        }
    }
}

/// Rank of the true class: 1 when it has the strictly highest score; ties
/// count against the prediction.
fn rank_of(scores: &[f64], label: usize) -> usize {
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != label && s >= scores[label])
        .count()
}

pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    base_hw: [usize; 2],
    eval: &EvalOptions,
) -> Result<EvalReport> {
    dataset.check_labels(model.config().k_action)?;
    let (mut top1, mut top5, mut views) = (0usize, 0usize, 0usize);
    for v in &dataset.videos {
        let (scores, n) = video_scores(model, v, base_hw, eval)?;
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("non-finite scores for video {}", v.video_id)));
        }
        let r = rank_of(&scores, v.action_label);
        top1 += usize::from(r == 1);
        top5 += usize::from(r <= 5);
        views = n;
    }
    let n = dataset.videos.len() as f64;
    Ok(EvalReport {
        protocol: eval.protocol,
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
        videos: dataset.videos.len(),
        views_per_video: views,
    })
}

/// Sum of squares of every trainable tensor; handy for checking that
/// parameters moved.
pub fn param_norm<T: Scalar>(store: &ParamStore<T>) -> f64 {
    store
        .entries()
        .iter()
        .filter(|e| e.kind == EntryKind::Param)
        .flat_map(|e| e.tensor.data().iter().map(|v| v.as_f64() * v.as_f64()))
        .sum()
}
