//! Gradient-check targets for the command-line `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::akg::{self, Activation, EdgeMask, MaskKind, RelationKind, RelationVars};
use crate::autodiff::{Tape, Var};
use crate::cbi;
use crate::distill::{self, BinaryMask};
use crate::error::Result;
use crate::gradcheck::{grad_check, CheckOptions, CheckReport, GradSubject, SessionSubject, TapeSubject};
use crate::netcore::{build_model, ForwardOptions, ModelConfig};
use crate::params::{Mode, ParamStore};
use crate::tensor::Tensor;
use crate::trainer::LossWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Cbi,
    Akg,
    Losses,
    Model,
    All,
}

impl Target {
    pub const ALL: [Target; 4] = [Target::Cbi, Target::Akg, Target::Losses, Target::Model];

    pub fn expand(self) -> Vec<Target> {
        match self {
            Target::All => Self::ALL.to_vec(),
            t => vec![t],
        }
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Uniform in `±[margin, 1]`, keeping ReLU and BN inputs off their kinks.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng, margin: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(margin..1.0);
            if rng.random_bool(0.5) {
                -v
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// A scalar probe of an output: its dot product with fixed random weights.
fn probe(t: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(t.shape(out), &mut rng, -1.0, 1.0);
    t.dot_const(out, &w)
}

fn cbi_subject(seed: u64) -> Box<dyn GradSubject> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 3;
    let mut store = ParamStore::new();
    cbi::register_params(&mut store, "cbi", c).expect("fresh store");
    store
        .set("cbi/reduce/weight", uniform(&[c, 3 * c, 1, 1], &mut rng, -0.5, 0.5))
        .expect("shape");
    store
        .set("cbi/reduce/bias", uniform(&[c], &mut rng, -0.5, 0.5))
        .expect("shape");
    store
        .set("cbi/bn_scene/gamma", uniform(&[c], &mut rng, 0.5, 1.5))
        .expect("shape");
    store
        .set("cbi/bn_human/gamma", uniform(&[c], &mut rng, 0.5, 1.5))
        .expect("shape");
    let shape = [2, c, 3, 3];
    let inputs = vec![
        uniform(&shape, &mut rng, -1.0, 1.0),
        away_from_zero(&shape, &mut rng, 0.05),
        away_from_zero(&shape, &mut rng, 0.05),
    ];
    Box::new(SessionSubject::new("cbi", store, inputs, Mode::Eval, move |s, x| {
        let out = cbi::cbi_forward(s, "cbi", x[0], x[1], x[2])?;
        probe(&mut s.tape, out, seed ^ 1)
    }))
}

const AKG_SHAPE: (usize, usize, usize) = (2, 2, 4);

fn relation_subject(kind: RelationKind, seed: u64) -> Box<dyn GradSubject> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, n, d) = AKG_SHAPE;
    let de = akg::embed_dim(d);
    let point = vec![
        uniform(&[v, 3 * n, d], &mut rng, -1.0, 1.0),
        uniform(&[d, de], &mut rng, -1.0, 1.0),
        uniform(&[d, de], &mut rng, -1.0, 1.0),
        uniform(&[2 * de, 1], &mut rng, -1.0, 1.0),
    ];
    let name = match kind {
        RelationKind::Dot => "akg/relation_dot",
        RelationKind::EmbeddedDot => "akg/relation_embedded_dot",
        RelationKind::Concat => "akg/relation_concat",
    };
    Box::new(TapeSubject::new(name, point, move |t, p| {
        let rel = RelationVars {
            kind,
            theta: Some(p[1]),
            phi: Some(p[2]),
            w_cat: Some(p[3]),
        };
        let s = akg::relation_scores(t, p[0], &rel)?;
        probe(t, s, seed ^ 2)
    }))
}

fn normalization_subject(seed: u64) -> Box<dyn GradSubject> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, n, _) = AKG_SHAPE;
    let point = vec![uniform(&[v, 3 * n, 3 * n], &mut rng, -2.0, 2.0)];
    let masks = [
        EdgeMask::new(n, MaskKind::SceneHumanBlocked),
        EdgeMask::new(n, MaskKind::ActionIncident),
    ];
    Box::new(TapeSubject::new("akg/normalization", point, move |t, p| {
        let a = akg::normalize_graph(t, p[0], &masks[0])?;
        let a = probe(t, a, seed ^ 3)?;
        let b = akg::normalize_graph(t, p[0], &masks[1])?;
        let b = probe(t, b, seed ^ 4)?;
        t.add(a, b)
    }))
}

fn gcn_subject(seed: u64) -> Box<dyn GradSubject> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, n, d) = AKG_SHAPE;
    let nodes = 3 * n;
    let point = vec![
        uniform(&[v, nodes, nodes], &mut rng, 0.0, 1.0),
        uniform(&[v, nodes, d], &mut rng, -1.0, 1.0),
        uniform(&[d, d], &mut rng, -1.0, 1.0),
    ];
    Box::new(TapeSubject::new("akg/gcn", point, move |t, p| {
        let z = akg::gcn_layer(t, p[0], p[1], p[2], Activation::Relu)?;
        let zi = akg::gcn_layer(t, p[0], p[1], p[2], Activation::Identity)?;
        let z = t.add(z, zi)?;
        let a = akg::select_action_nodes(t, z, n)?;
        probe(t, a, seed ^ 5)
    }))
}

fn losses_subject(seed: u64) -> Box<dyn GradSubject> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, k, b) = (4, 5, 3);
    let mut store = ParamStore::new();
    distill::register_linear(&mut store, distill::SCENE_HEAD, d, k, seed).expect("fresh store");
    distill::register_human_head(&mut store, d, seed).expect("fresh store");
    store
        .set(
            &format!("{}/weight", distill::SCENE_HEAD),
            uniform(&[d, k], &mut rng, -1.0, 1.0),
        )
        .expect("shape");
    store
        .set(
            &format!("{}/weight", distill::HUMAN_HEAD),
            uniform(&[2, d, 1, 1], &mut rng, -1.0, 1.0),
        )
        .expect("shape");
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
    let masks: Vec<BinaryMask> = (0..b)
        .map(|_| {
            let cells = (0..16).map(|_| u8::from(rng.random_bool(0.4))).collect();
            BinaryMask::new(4, 4, cells).expect("sized")
        })
        .collect();
    let inputs = vec![
        uniform(&[b, d], &mut rng, -1.0, 1.0),
        uniform(&[b, d, 4, 4], &mut rng, -1.0, 1.0),
    ];
    Box::new(SessionSubject::new("losses", store, inputs, Mode::Eval, move |s, x| {
        let sl = distill::scene_head(s, x[0])?;
        let a = distill::scene_loss(&mut s.tape, sl, &labels)?;
        let hl = distill::human_head(s, x[1])?;
        let h = distill::human_loss(&mut s.tape, hl, &masks)?;
        s.tape.weighted_sum(&[(a, 1.0), (h, 1.0)])
    }))
}

/// Small enough to check every coordinate quickly, but with every
/// component present: shared stem, three branches, CBI, AKG and all heads.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        n_seg: 2,
        input_hw: [12, 12],
        stem_channels: vec![3],
        stage_channels: vec![4, 4],
        stage_strides: vec![1, 2],
        blocks_per_stage: 1,
        shared_stages: 0,
        cbi_attach: vec!["res2".into(), "res3".into()],
        akg: true,
        k_action: 3,
        k_scene: 4,
        ..ModelConfig::default()
    }
}

fn model_subject(seed: u64) -> Result<Box<dyn GradSubject>> {
    let cfg = micro_config();
    let mut model = build_model::<f64>(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // move fresh parameters off their structured inits (identity, zeros,
    // unit gammas) so each carries a generic gradient
    for i in model.store.param_indices() {
        let e = model.store.entry_mut(i);
        if e.name.ends_with("gamma") {
            continue;
        }
        let noise = uniform(e.tensor.shape(), &mut rng, -0.3, 0.3);
        for (v, n) in e.tensor.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let videos = 2;
    let [h, w] = cfg.input_hw;
    let [fh, fw] = cfg.feature_hw();
    // small inputs keep the dot-product graph off saturation, where true
    // gradients sink below finite-difference resolution
    let frames = uniform(&[videos * cfg.n_seg, 3, h, w], &mut rng, -0.3, 0.3);
    let labels: Vec<usize> = (0..videos).map(|v| v % cfg.k_action).collect();
    let scene: Vec<usize> = (0..videos * cfg.n_seg)
        .map(|_| rng.random_range(0..cfg.k_scene))
        .collect();
    let masks: Vec<BinaryMask> = (0..videos * cfg.n_seg)
        .map(|_| BinaryMask::from_fn(fh, fw, |y, x| (y + x) % 2 == 0))
        .collect();
    let weights = LossWeights::default();
    let store = model.store.clone();
    Ok(Box::new(SessionSubject::new(
        "model",
        store,
        vec![frames],
        Mode::Eval,
        move |s, x| {
            let opts = ForwardOptions {
                scene_head: true,
                human_head: true,
            };
            let out = model.forward(s, x[0], opts)?;
            let la = s.tape.cross_entropy(out.action_logits, &labels)?;
            let ls = distill::scene_loss(&mut s.tape, out.scene_logits.expect("scene head requested"), &scene)?;
            let lh = distill::human_loss(&mut s.tape, out.human_logits.expect("human head requested"), &masks)?;
            s.tape.weighted_sum(&[
                (la, weights.lambda_action),
                (lh, weights.lambda_human),
                (ls, weights.lambda_scene),
            ])
        },
    )))
}

/// Every subject of one target.
pub fn subjects(target: Target, seed: u64) -> Result<Vec<Box<dyn GradSubject>>> {
    Ok(match target {
        Target::Cbi => vec![cbi_subject(seed)],
        Target::Akg => vec![
            relation_subject(RelationKind::Dot, seed),
            relation_subject(RelationKind::EmbeddedDot, seed),
            relation_subject(RelationKind::Concat, seed),
            normalization_subject(seed),
            gcn_subject(seed),
        ],
        Target::Losses => vec![losses_subject(seed)],
        Target::Model => vec![model_subject(seed)?],
        Target::All => {
            let mut all = Vec::new();
            for t in Target::ALL {
                all.extend(subjects(t, seed)?);
            }
            all
        }
    })
}

pub fn run(target: Target, seed: u64, options: &CheckOptions) -> Result<Vec<CheckReport>> {
    subjects(target, seed)?
        .iter()
        .map(|s| grad_check(s.as_ref(), options))
        .collect()
}
