//! Backbone: a shared stem followed by three private residual branches
//! (action, scene, human), with CBI fusion at configured stages, the action
//! knowledge graph, and the classification heads.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::akg::{self, Activation, EdgeMask, MaskKind, RelationKind};
use crate::autodiff::{Tape, Var};
use crate::cbi;
use crate::distill;
use crate::error::{Error, Result};
use crate::params::{he_normal, register_batch_norm, EntryKind, ParamStore, Session};
use crate::tensor::{Scalar, Tensor};

pub const BRANCHES: [&str; 3] = ["action", "scene", "human"];
pub const ACTION_HEAD: &str = "heads/action";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_seg: usize,
    /// Network input `[height, width]`.
    pub input_hw: [usize; 2],
    /// One 3×3 stride-2 conv-BN-ReLU layer per entry.
    pub stem_channels: Vec<usize>,
    /// Output width of each residual stage (`res2`, `res3`, ...).
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Leading stages computed once and shared by all branches.
    pub shared_stages: usize,
    pub cbi_attach: Vec<String>,
    pub akg: bool,
    pub relation_kind: RelationKind,
    pub edge_mask: MaskKind,
    pub gcn_activation: Activation,
    pub k_action: usize,
    pub k_scene: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_seg: 3,
            input_hw: [48, 48],
            stem_channels: vec![16, 16],
            stage_channels: vec![16, 24, 32, 32],
            stage_strides: vec![1, 2, 2, 1],
            blocks_per_stage: 2,
            shared_stages: 0,
            cbi_attach: vec!["res4".into(), "res5".into()],
            akg: true,
            relation_kind: RelationKind::Dot,
            edge_mask: MaskKind::SceneHumanBlocked,
            gcn_activation: Activation::Relu,
            k_action: 4,
            k_scene: 365,
        }
    }
}

fn conv_out(len: usize, stride: usize) -> usize {
    // 3×3 kernel with padding 1
    (len - 1) / stride + 1
}

impl ModelConfig {
    pub fn stage_names(&self) -> Vec<String> {
        (0..self.stage_channels.len())
            .map(|i| format!("res{}", i + 2))
            .collect()
    }

    /// Final branch width.
    pub fn d(&self) -> usize {
        *self.stage_channels.last().expect("validated config has stages")
    }

    pub fn stem_stride(&self) -> usize {
        1 << self.stem_channels.len()
    }

    /// Spatial size after the stem.
    pub fn stem_hw(&self) -> [usize; 2] {
        let mut hw = self.input_hw;
        for _ in &self.stem_channels {
            hw = [conv_out(hw[0], 2), conv_out(hw[1], 2)];
        }
        hw
    }

    /// Spatial size of the final-stage maps.
    pub fn feature_hw(&self) -> [usize; 2] {
        let mut hw = self.stem_hw();
        for &s in &self.stage_strides {
            hw = [conv_out(hw[0], s), conv_out(hw[1], s)];
        }
        hw
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: &[usize]| -> Result<()> {
            if v.is_empty() || v.contains(&0) {
                return Err(Error::config(field, "must be a non-empty list of positive integers"));
            }
            Ok(())
        };
        if self.n_seg == 0 {
            return Err(Error::config("n_seg", "must be at least 1"));
        }
        if self.input_hw.contains(&0) {
            return Err(Error::config("input_hw", "extents must be positive"));
        }
        positive("stem_channels", &self.stem_channels)?;
        positive("stage_channels", &self.stage_channels)?;
        positive("stage_strides", &self.stage_strides)?;
        if self.stage_strides.len() != self.stage_channels.len() {
            return Err(Error::config(
                "stage_strides",
                format!(
                    "has {} entries for {} stages",
                    self.stage_strides.len(),
                    self.stage_channels.len()
                ),
            ));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::config("blocks_per_stage", "must be at least 1"));
        }
        if self.shared_stages >= self.stage_channels.len() {
            return Err(Error::config(
                "shared_stages",
                "at least one stage must be branch-private",
            ));
        }
        if self.k_action == 0 {
            return Err(Error::config("k_action", "must be at least 1"));
        }
        if self.k_scene == 0 {
            return Err(Error::config("k_scene", "must be at least 1"));
        }
        let names = self.stage_names();
        let mut seen = BTreeSet::new();
        for s in &self.cbi_attach {
            let Some(pos) = names.iter().position(|n| n == s) else {
                return Err(Error::config(
                    "cbi_attach",
                    format!("unknown stage {s:?}; stages are {names:?}"),
                ));
            };
            if pos < self.shared_stages {
                return Err(Error::config(
                    "cbi_attach",
                    format!("stage {s} is shared, not a branch stage"),
                ));
            }
            if !seen.insert(s) {
                return Err(Error::config("cbi_attach", format!("stage {s} listed twice")));
            }
        }
        Ok(())
    }

    /// Number of scalars [`Model::build`] allocates, computed without
    /// allocating. Saturates instead of overflowing.
    pub fn scalar_count(&self, kind: ModelKind) -> u128 {
        let conv = |co: usize, ci: usize, k: usize| (co as u128) * (ci as u128) * (k * k) as u128;
        let bn = |c: usize| 4 * c as u128;
        let stage = |ci: usize, co: usize, stride: usize| -> u128 {
            let mut n = 0u128;
            for b in 0..self.blocks_per_stage {
                let (i, st) = if b == 0 { (ci, stride) } else { (co, 1) };
                n = n.saturating_add(conv(co, i, 3) + bn(co) + conv(co, co, 3) + bn(co));
                if needs_projection(i, co, st) {
                    n = n.saturating_add(conv(co, i, 1) + bn(co));
                }
            }
            n
        };
        let mut n = 0u128;
        let mut c = 3;
        for &co in &self.stem_channels {
            n = n.saturating_add(conv(co, c, 3) + bn(co));
            c = co;
        }
        for s in 0..self.shared_stages.min(self.stage_channels.len()) {
            n = n.saturating_add(stage(c, self.stage_channels[s], self.stage_strides[s]));
            c = self.stage_channels[s];
        }
        let branches = if kind == ModelKind::Full { 3 } else { 1 };
        let mut per_branch = 0u128;
        let mut ci = c;
        for s in self.shared_stages..self.stage_channels.len() {
            per_branch = per_branch.saturating_add(stage(ci, self.stage_channels[s], self.stage_strides[s]));
            ci = self.stage_channels[s];
        }
        n = n.saturating_add(per_branch.saturating_mul(branches));
        let d = self.d() as u128;
        let k_a = self.k_action as u128;
        n = n.saturating_add(d * k_a + k_a);
        if kind == ModelKind::Full {
            for (s, name) in self.stage_names().iter().enumerate() {
                if self.attaches_cbi(name) {
                    let c = self.stage_channels[s];
                    n = n.saturating_add(2 * bn(c) + conv(c, 3 * c, 1) + c as u128);
                }
            }
            if self.akg {
                let de = akg::embed_dim(self.d()) as u128;
                n = n.saturating_add(d * d);
                if self.relation_kind != RelationKind::Dot {
                    n = n.saturating_add(2 * d * de);
                }
                if self.relation_kind == RelationKind::Concat {
                    n = n.saturating_add(2 * de);
                }
            }
            let k_s = self.k_scene as u128;
            n = n.saturating_add(d * k_s + k_s + 2 * d + 2);
        }
        n
    }

    fn attaches_cbi(&self, stage: &str) -> bool {
        self.cbi_attach.iter().any(|s| s == stage)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// All three branches plus CBI, AKG and auxiliary heads as configured.
    Full,
    /// Stem, action branch and action classifier only.
    TsnBaseline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    kind: ModelKind,
    pub store: ParamStore<T>,
}

/// Which auxiliary outputs a forward pass must produce.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub scene_head: bool,
    pub human_head: bool,
}

#[derive(Debug, Clone)]
pub struct StageFeatures {
    pub name: String,
    /// Post-CBI where CBI is attached.
    pub action: Var,
    pub scene: Option<Var>,
    pub human: Option<Var>,
}

pub struct ForwardOutput {
    /// Segment-averaged video logits `[V, k_action]`.
    pub action_logits: Var,
    /// `[V·n_seg, k_scene]`
    pub scene_logits: Option<Var>,
    /// `[V·n_seg, 2, h, w]`
    pub human_logits: Option<Var>,
    pub stages: Vec<StageFeatures>,
}

/// Pooled per-frame features, the input of [`Model::classify`].
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeatures<T> {
    /// `[F, d]`
    pub action: Tensor<T>,
    pub scene: Option<Tensor<T>>,
    pub human: Option<Tensor<T>>,
}

pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    Model::build(config, seed, ModelKind::Full)
}

fn register_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    seed: u64,
) -> Result<()> {
    let name = format!("{prefix}/weight");
    store.insert(
        &name,
        EntryKind::Param,
        he_normal(&[c_out, c_in, k, k], c_in * k * k, seed, &name),
    )?;
    Ok(())
}

fn register_stage<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    stride: usize,
    blocks: usize,
    seed: u64,
) -> Result<()> {
    for b in 0..blocks {
        let p = format!("{prefix}/block{b}");
        let (ci, st) = if b == 0 { (c_in, stride) } else { (c_out, 1) };
        register_conv(store, &format!("{p}/conv1"), c_out, ci, 3, seed)?;
        register_batch_norm(store, &format!("{p}/bn1"), c_out)?;
        register_conv(store, &format!("{p}/conv2"), c_out, c_out, 3, seed)?;
        register_batch_norm(store, &format!("{p}/bn2"), c_out)?;
        if needs_projection(ci, c_out, st) {
            register_conv(store, &format!("{p}/downsample"), c_out, ci, 1, seed)?;
            register_batch_norm(store, &format!("{p}/downsample_bn"), c_out)?;
        }
    }
    Ok(())
}

fn needs_projection(c_in: usize, c_out: usize, stride: usize) -> bool {
    stride != 1 || c_in != c_out
}

impl<T: Scalar> Model<T> {
    /// Parameters are initialized from a stream keyed by `(seed, name)`, so
    /// a parameter's initial value does not depend on which others exist.
    pub fn build(config: &ModelConfig, seed: u64, kind: ModelKind) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut c = 3;
        for (i, &co) in config.stem_channels.iter().enumerate() {
            register_conv(&mut store, &format!("stem/conv{}", i + 1), co, c, 3, seed)?;
            register_batch_norm(&mut store, &format!("stem/bn{}", i + 1), co)?;
            c = co;
        }
        let names = config.stage_names();
        let mut c_shared = c;
        for s in 0..config.shared_stages {
            let co = config.stage_channels[s];
            register_stage(
                &mut store,
                &format!("stem/{}", names[s]),
                c_shared,
                co,
                config.stage_strides[s],
                config.blocks_per_stage,
                seed,
            )?;
            c_shared = co;
        }
        let branches: &[&str] = match kind {
            ModelKind::Full => &BRANCHES,
            ModelKind::TsnBaseline => &BRANCHES[..1],
        };
        for branch in branches {
            let mut ci = c_shared;
            for s in config.shared_stages..names.len() {
                let co = config.stage_channels[s];
                register_stage(
                    &mut store,
                    &format!("{branch}/{}", names[s]),
                    ci,
                    co,
                    config.stage_strides[s],
                    config.blocks_per_stage,
                    seed,
                )?;
                ci = co;
            }
        }
        let d = config.d();
        if kind == ModelKind::Full {
            for (s, name) in names.iter().enumerate() {
                if config.attaches_cbi(name) {
                    cbi::register_params(&mut store, &format!("cbi/{name}"), config.stage_channels[s])?;
                }
            }
            if config.akg {
                akg::register_params(&mut store, config.relation_kind, d, seed)?;
            }
        }
        distill::register_linear(&mut store, ACTION_HEAD, d, config.k_action, seed)?;
        if kind == ModelKind::Full {
            distill::register_linear(&mut store, distill::SCENE_HEAD, d, config.k_scene, seed)?;
            distill::register_human_head(&mut store, d, seed)?;
        }
        Ok(Model {
            config: config.clone(),
            kind,
            store,
        })
    }

    /// Stem, action branch and action classifier only; no fusion, graph or
    /// auxiliary heads.
    pub fn tsn_baseline(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut cfg = config.clone();
        cfg.cbi_attach.clear();
        cfg.akg = false;
        Self::build(&cfg, seed, ModelKind::TsnBaseline)
    }

    /// Reassembles a model around an existing parameter store, checking
    /// that it holds exactly the expected entries and shapes.
    pub fn from_store(config: &ModelConfig, kind: ModelKind, store: ParamStore<T>) -> Result<Self> {
        let template = Self::build(config, 0, kind)?;
        if template.store.len() != store.len() {
            return Err(Error::Validation(format!(
                "parameter count {} does not match the configuration ({})",
                store.len(),
                template.store.len()
            )));
        }
        for (a, b) in template.store.entries().iter().zip(store.entries()) {
            if a.name != b.name || a.kind != b.kind {
                return Err(Error::Validation(format!(
                    "expected parameter {}, found {}",
                    a.name, b.name
                )));
            }
            if a.tensor.shape() != b.tensor.shape() {
                return Err(Error::shape(&a.name, a.tensor.shape(), b.tensor.shape()));
            }
        }
        Ok(Model {
            config: config.clone(),
            kind,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            kind: self.kind,
            store: self.store.cast(),
        }
    }

    pub fn session(&self, mode: crate::params::Mode) -> Session<'_, T> {
        Session::new(&self.store, mode)
    }

    fn conv_bn_relu(s: &mut Session<'_, T>, conv: &str, bn: &str, x: Var, stride: usize) -> Result<Var> {
        let y = s.conv(conv, x, stride, 1)?;
        let y = s.batch_norm(bn, y)?;
        Ok(s.tape.relu(y))
    }

    fn residual_stage(&self, s: &mut Session<'_, T>, prefix: &str, stage: usize, mut x: Var) -> Result<Var> {
        let c_out = self.config.stage_channels[stage];
        for b in 0..self.config.blocks_per_stage {
            let p = format!("{prefix}/block{b}");
            let c_in = s.tape.shape(x)[1];
            let stride = if b == 0 { self.config.stage_strides[stage] } else { 1 };
            let h = Self::conv_bn_relu(s, &format!("{p}/conv1"), &format!("{p}/bn1"), x, stride)?;
            let h = s.conv(&format!("{p}/conv2"), h, 1, 1)?;
            let h = s.batch_norm(&format!("{p}/bn2"), h)?;
            let shortcut = if needs_projection(c_in, c_out, stride) {
                let sc = s.conv(&format!("{p}/downsample"), x, stride, 0)?;
                s.batch_norm(&format!("{p}/downsample_bn"), sc)?
            } else {
                x
            };
            let sum = s.tape.add(h, shortcut)?;
            x = s.tape.relu(sum);
        }
        Ok(x)
    }

    /// `frames: [B, 3, H, W]` → the shared map all branches start from.
    pub fn forward_stem(&self, s: &mut Session<'_, T>, frames: Var) -> Result<Var> {
        let shape = s.tape.shape(frames).to_vec();
        let [h, w] = self.config.input_hw;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != h || shape[3] != w {
            let b = shape.first().copied().unwrap_or(0);
            return Err(Error::shape("frames", &[b, 3, h, w], &shape));
        }
        let mut x = frames;
        for i in 1..=self.config.stem_channels.len() {
            x = Self::conv_bn_relu(s, &format!("stem/conv{i}"), &format!("stem/bn{i}"), x, 2)?;
        }
        let names = self.config.stage_names();
        for st in 0..self.config.shared_stages {
            x = self.residual_stage(s, &format!("stem/{}", names[st]), st, x)?;
        }
        Ok(x)
    }

    /// Branches a forward pass needs to compute given the auxiliary outputs
    /// requested: `(scene, human)`.
    pub fn branches_needed(&self, opts: ForwardOptions) -> (bool, bool) {
        if self.kind == ModelKind::TsnBaseline {
            return (false, false);
        }
        let fused = !self.config.cbi_attach.is_empty() || self.config.akg;
        (fused || opts.scene_head, fused || opts.human_head)
    }

    pub fn forward_branches(
        &self,
        s: &mut Session<'_, T>,
        stem_out: Var,
        opts: ForwardOptions,
    ) -> Result<Vec<StageFeatures>> {
        let (need_scene, need_human) = self.branches_needed(opts);
        let names = self.config.stage_names();
        let mut action = stem_out;
        let mut scene = need_scene.then_some(stem_out);
        let mut human = need_human.then_some(stem_out);
        let mut out = Vec::new();
        for st in self.config.shared_stages..names.len() {
            let name = &names[st];
            action = self.residual_stage(s, &format!("action/{name}"), st, action)?;
            if let Some(x) = scene {
                scene = Some(self.residual_stage(s, &format!("scene/{name}"), st, x)?);
            }
            if let Some(x) = human {
                human = Some(self.residual_stage(s, &format!("human/{name}"), st, x)?);
            }
            if self.kind == ModelKind::Full && self.config.attaches_cbi(name) {
                let (sc, hu) = (
                    scene.expect("scene branch computed"),
                    human.expect("human branch computed"),
                );
                action = cbi::cbi_forward(s, &format!("cbi/{name}"), action, sc, hu)?;
            }
            out.push(StageFeatures {
                name: name.clone(),
                action,
                scene,
                human,
            });
        }
        Ok(out)
    }

    /// Pooled action/scene/human vectors for `groups` graphs of `n` frames
    /// each, rows ordered graph-major. Returns video logits `[groups, K]`.
    pub fn classify(
        &self,
        s: &mut Session<'_, T>,
        action: Var,
        scene: Option<Var>,
        human: Option<Var>,
        n: usize,
    ) -> Result<Var> {
        let f = s.tape.shape(action)[0];
        let d = self.config.d();
        if n == 0 || !f.is_multiple_of(n) {
            return Err(Error::shape("frames per group", &[n], &[f]));
        }
        let groups = f / n;
        let feats = if self.kind == ModelKind::Full && self.config.akg {
            let (Some(sc), Some(hu)) = (scene, human) else {
                return Err(Error::config("akg", "graph reasoning needs scene and human features"));
            };
            let a = s.tape.reshape(action, &[groups, n, d])?;
            let sc = s.tape.reshape(sc, &[groups, n, d])?;
            let hu = s.tape.reshape(hu, &[groups, n, d])?;
            let nodes = akg::build_nodes(&mut s.tape, a, sc, hu)?;
            let rel = akg::bind_relation(s, self.config.relation_kind)?;
            let w = s.param("akg/gcn/weight")?;
            let mask = EdgeMask::new(n, self.config.edge_mask);
            let out = akg::reason(&mut s.tape, nodes, &rel, &mask, w, self.config.gcn_activation)?;
            s.tape.reshape(out.action, &[f, d])?
        } else {
            action
        };
        let logits = distill::linear(s, ACTION_HEAD, feats)?;
        let k = self.config.k_action;
        let logits = s.tape.reshape(logits, &[groups, n, k])?;
        s.tape.mean(logits, 1)
    }

    /// Full forward pass over `[V·n_seg, 3, H, W]` frames, video-major.
    pub fn forward(&self, s: &mut Session<'_, T>, frames: Var, opts: ForwardOptions) -> Result<ForwardOutput> {
        let b = s.tape.shape(frames).first().copied().unwrap_or(0);
        if b == 0 || b % self.config.n_seg != 0 {
            return Err(Error::shape(
                "frames batch (videos × n_seg)",
                &[self.config.n_seg],
                &[b],
            ));
        }
        let stem = self.forward_stem(s, frames)?;
        let stages = self.forward_branches(s, stem, opts)?;
        let last = stages.last().expect("at least one private stage").clone();
        let pa = global_avg_pool(&mut s.tape, last.action)?;
        let ps = last.scene.map(|x| global_avg_pool(&mut s.tape, x)).transpose()?;
        let ph = last.human.map(|x| global_avg_pool(&mut s.tape, x)).transpose()?;
        let action_logits = self.classify(s, pa, ps, ph, self.config.n_seg)?;
        let scene_logits = match (opts.scene_head && self.kind == ModelKind::Full, ps) {
            (true, Some(p)) => Some(distill::scene_head(s, p)?),
            _ => None,
        };
        let human_logits = match (opts.human_head && self.kind == ModelKind::Full, last.human) {
            (true, Some(h)) => Some(distill::human_head(s, h)?),
            _ => None,
        };
        Ok(ForwardOutput {
            action_logits,
            scene_logits,
            human_logits,
            stages,
        })
    }

    /// Pooled final-stage features of independent frames, as plain tensors.
    /// Run in eval mode so each frame's features do not depend on its batch.
    pub fn pooled_features(&self, frames: Tensor<T>) -> Result<PooledFeatures<T>> {
        let mut s = self.session(crate::params::Mode::Eval);
        let x = s.tape.constant(frames);
        let stem = self.forward_stem(&mut s, x)?;
        let stages = self.forward_branches(&mut s, stem, ForwardOptions::default())?;
        let last = stages.last().expect("at least one private stage");
        let pool = |s: &mut Session<'_, T>, v: Var| -> Result<Tensor<T>> {
            let p = global_avg_pool(&mut s.tape, v)?;
            Ok(s.tape.value(p).clone())
        };
        Ok(PooledFeatures {
            action: pool(&mut s, last.action)?,
            scene: last.scene.map(|v| pool(&mut s, v)).transpose()?,
            human: last.human.map(|v| pool(&mut s, v)).transpose()?,
        })
    }

    /// Video logits for pooled features already grouped `n` frames per graph.
    pub fn classify_pooled(&self, pooled: &PooledFeatures<T>, n: usize) -> Result<Tensor<T>> {
        let mut s = self.session(crate::params::Mode::Eval);
        let a = s.tape.constant(pooled.action.clone());
        let sc = pooled.scene.clone().map(|t| s.tape.constant(t));
        let hu = pooled.human.clone().map(|t| s.tape.constant(t));
        let out = self.classify(&mut s, a, sc, hu, n)?;
        Ok(s.tape.value(out).clone())
    }
}

/// Spatial mean per channel: `[B, C, h, w]` → `[B, C]`.
pub fn global_avg_pool<T: Scalar>(tape: &mut Tape<T>, fm: Var) -> Result<Var> {
    let s = tape.shape(fm).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("feature map rank", &[0, 0, 0, 0], &s));
    }
    let flat = tape.reshape(fm, &[s[0], s[1], s[2] * s[3]])?;
    tape.mean(flat, 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Mode;
    use crate::testutil::uniform;

    fn small() -> ModelConfig {
        ModelConfig {
            input_hw: [32, 32],
            stem_channels: vec![4, 6],
            stage_channels: vec![6, 8, 8, 10],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_model::<f32>(&ModelConfig::default(), 7).unwrap();
        let b = build_model::<f32>(&ModelConfig::default(), 7).unwrap();
        assert_eq!(a, b);
        let c = build_model::<f32>(&ModelConfig::default(), 8).unwrap();
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn scalar_count_matches_built_store() {
        let variants = [
            ModelConfig::default(),
            small(),
            ModelConfig {
                shared_stages: 2,
                cbi_attach: vec!["res5".into()],
                ..small()
            },
            ModelConfig {
                relation_kind: RelationKind::Concat,
                blocks_per_stage: 1,
                ..small()
            },
            ModelConfig {
                relation_kind: RelationKind::EmbeddedDot,
                akg: false,
                ..small()
            },
        ];
        for cfg in variants {
            for kind in [ModelKind::Full, ModelKind::TsnBaseline] {
                let m = Model::<f32>::build(&cfg, 0, kind).unwrap();
                let n: usize = m.store.entries().iter().map(|e| e.tensor.len()).sum();
                assert_eq!(cfg.scalar_count(kind), n as u128, "{kind:?} {cfg:?}");
            }
        }
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let cases: Vec<(ModelConfig, &str)> = vec![
            (
                ModelConfig {
                    cbi_attach: vec!["res9".into()],
                    ..ModelConfig::default()
                },
                "cbi_attach",
            ),
            (
                ModelConfig {
                    cbi_attach: vec!["res4".into(), "res4".into()],
                    ..ModelConfig::default()
                },
                "cbi_attach",
            ),
            (
                ModelConfig {
                    n_seg: 0,
                    ..ModelConfig::default()
                },
                "n_seg",
            ),
            (
                ModelConfig {
                    stage_strides: vec![1, 2],
                    ..ModelConfig::default()
                },
                "stage_strides",
            ),
            (
                ModelConfig {
                    shared_stages: 4,
                    ..ModelConfig::default()
                },
                "shared_stages",
            ),
            (
                ModelConfig {
                    shared_stages: 3,
                    ..ModelConfig::default()
                },
                "cbi_attach",
            ),
        ];
        for (cfg, field) in cases {
            match build_model::<f32>(&cfg, 0) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected config error on {field}, got {:?}", other.map(|_| ())),
            }
        }
    }

    #[test]
    fn parameter_names_partition_by_component() {
        let m = build_model::<f32>(&ModelConfig::default(), 1).unwrap();
        let prefixes = ["stem/", "action/", "scene/", "human/", "cbi/", "akg/", "heads/"];
        let mut seen = [0usize; 7];
        for e in m.store.entries() {
            let hits: Vec<usize> = (0..7).filter(|&i| e.name.starts_with(prefixes[i])).collect();
            assert_eq!(hits.len(), 1, "{}", e.name);
            seen[hits[0]] += 1;
        }
        assert!(seen.iter().all(|&c| c > 0), "{seen:?}");
    }

    #[test]
    fn stem_stride_four() {
        let cfg = ModelConfig {
            input_hw: [64, 64],
            ..ModelConfig::default()
        };
        let m = build_model::<f32>(&cfg, 0).unwrap();
        let mut s = m.session(Mode::Train);
        let x = s.tape.constant(uniform(&[6, 3, 64, 64], 1, -1.0, 1.0));
        let y = m.forward_stem(&mut s, x).unwrap();
        assert_eq!(s.tape.shape(y), &[6, 16, 16, 16]);
        assert_eq!(cfg.stem_stride(), 4);

        let bad = s.tape.constant(Tensor::zeros(&[6, 3, 60, 64]));
        match m.forward_stem(&mut s, bad) {
            Err(Error::Shape { expected, actual, .. }) => {
                assert_eq!(expected, vec![6, 3, 64, 64]);
                assert_eq!(actual, vec![6, 3, 60, 64]);
            }
            _ => panic!("expected shape error"),
        }
    }

    #[test]
    fn zero_frames_give_zero_stem_output() {
        let m = build_model::<f64>(&small(), 3).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let mut s = m.session(mode);
            let x = s.tape.constant(Tensor::zeros(&[3, 3, 32, 32]));
            let y = m.forward_stem(&mut s, x).unwrap();
            assert!(s.tape.value(y).data().iter().all(|&v| v == 0.0));
        }
    }

    fn action_features(m: &Model<f64>, frames: &Tensor<f64>) -> Vec<Tensor<f64>> {
        let mut s = m.session(Mode::Eval);
        let x = s.tape.constant(frames.clone());
        let stem = m.forward_stem(&mut s, x).unwrap();
        let st = m
            .forward_branches(
                &mut s,
                stem,
                ForwardOptions {
                    scene_head: true,
                    human_head: true,
                },
            )
            .unwrap();
        st.iter().map(|f| s.tape.value(f.action).clone()).collect()
    }

    fn perturb_scene(m: &mut Model<f64>, delta: f64) {
        for i in 0..m.store.len() {
            if m.store.entry(i).name.starts_with("scene/") {
                let e = m.store.entry_mut(i);
                for v in e.tensor.data_mut() {
                    *v += delta;
                }
            }
        }
    }

    #[test]
    fn branches_are_independent_without_fusion() {
        let cfg = ModelConfig {
            cbi_attach: vec![],
            ..small()
        };
        let mut m = build_model::<f64>(&cfg, 2).unwrap();
        let frames = uniform(&[3, 3, 32, 32], 4, -1.0, 1.0);
        let before = action_features(&m, &frames);
        perturb_scene(&mut m, 0.3);
        assert_eq!(before, action_features(&m, &frames));
    }

    #[test]
    fn fusion_at_res4_carries_scene_signal_forward() {
        let cfg = ModelConfig {
            cbi_attach: vec!["res4".into()],
            ..small()
        };
        let mut m = build_model::<f64>(&cfg, 2).unwrap();
        let frames = uniform(&[3, 3, 32, 32], 4, -1.0, 1.0);
        let before = action_features(&m, &frames);
        perturb_scene(&mut m, 1e-3);
        let after = action_features(&m, &frames);
        // res2, res3 untouched; res4 and res5 move
        assert_eq!(before[0], after[0]);
        assert_eq!(before[1], after[1]);
        assert!(before[2].max_abs_diff(&after[2]) > 1e-9);
        assert!(before[3].max_abs_diff(&after[3]) > 1e-9);
    }

    #[test]
    fn final_stage_shapes_agree() {
        let m = build_model::<f32>(&ModelConfig::default(), 0).unwrap();
        let mut s = m.session(Mode::Train);
        let [h, w] = m.config().input_hw;
        let x = s.tape.constant(uniform(&[6, 3, h, w], 1, -1.0, 1.0));
        let stem = m.forward_stem(&mut s, x).unwrap();
        let st = m.forward_branches(&mut s, stem, ForwardOptions::default()).unwrap();
        let last = st.last().unwrap();
        let [fh, fw] = m.config().feature_hw();
        let want = [6, m.config().d(), fh, fw];
        for v in [last.action, last.scene.unwrap(), last.human.unwrap()] {
            assert_eq!(s.tape.shape(v), &want);
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let m = build_model::<f32>(&small(), 5).unwrap();
        let frames = uniform::<f32>(&[6, 3, 32, 32], 6, -1.0, 1.0);
        let run = || {
            let mut s = m.session(Mode::Train);
            let x = s.tape.constant(frames.clone());
            let o = m
                .forward(
                    &mut s,
                    x,
                    ForwardOptions {
                        scene_head: true,
                        human_head: true,
                    },
                )
                .unwrap();
            (
                s.tape.value(o.action_logits).clone(),
                s.tape.value(o.scene_logits.unwrap()).clone(),
                s.tape.value(o.human_logits.unwrap()).clone(),
            )
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.0.shape(), &[2, 4]);
        assert_eq!(a.1.shape(), &[6, 365]);
        assert_eq!(a.2.shape()[..2], [6, 2]);
    }

    #[test]
    fn baseline_forward_reads_only_action_path() {
        let cfg = ModelConfig {
            cbi_attach: vec![],
            akg: false,
            ..small()
        };
        let m = build_model::<f32>(&cfg, 5).unwrap();
        let mut s = m.session(Mode::Train);
        let x = s.tape.constant(uniform(&[3, 3, 32, 32], 1, -1.0, 1.0));
        m.forward(&mut s, x, ForwardOptions::default()).unwrap();
        let touched: Vec<&str> = s.touched().collect();
        assert!(!touched.is_empty());
        for name in touched {
            assert!(
                name.starts_with("stem/") || name.starts_with("action/") || name.starts_with("heads/action/"),
                "{name}"
            );
        }
        // the baseline holds exactly those entries, with identical values
        let base = Model::<f32>::tsn_baseline(&cfg, 5).unwrap();
        for e in base.store.entries() {
            assert_eq!(Some(&e.tensor), m.store.get(&e.name), "{}", e.name);
        }
    }

    #[test]
    fn global_pool_examples() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(Tensor::full(&[2, 3, 4, 5], 1.25));
        let p = global_avg_pool(&mut t, c).unwrap();
        assert!(t.value(p).data().iter().all(|&v| v == 1.25));

        let single = uniform::<f64>(&[2, 4, 1, 1], 3, -1.0, 1.0);
        let v = t.constant(single.clone());
        let p = global_avg_pool(&mut t, v).unwrap();
        assert_eq!(t.shape(p), &[2, 4]);
        assert_eq!(t.value(p).data(), single.data());

        let r = uniform::<f64>(&[3, 5, 6, 7], 4, -1.0, 1.0);
        let v = t.constant(r.clone());
        let p = global_avg_pool(&mut t, v).unwrap();
        for b in 0..3 {
            for ch in 0..5 {
                let mut sum = 0.0;
                for y in 0..6 {
                    for x in 0..7 {
                        sum += r.at(&[b, ch, y, x]);
                    }
                }
                assert!((t.value(p).at(&[b, ch]) - sum / 42.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn config_toml_round_trip_and_unknown_keys() {
        let cfg = ModelConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: ModelConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(toml::from_str::<ModelConfig>("bogus = 1").is_err());
        let partial: ModelConfig = toml::from_str("relation_kind = \"concat\"\nn_seg = 2").unwrap();
        assert_eq!(partial.relation_kind, RelationKind::Concat);
        assert_eq!(partial.n_seg, 2);
    }

    #[test]
    fn shared_stages_move_into_the_stem() {
        let cfg = ModelConfig {
            shared_stages: 1,
            ..small()
        };
        let m = build_model::<f32>(&cfg, 0).unwrap();
        assert!(m.store.get("stem/res2/block0/conv1/weight").is_some());
        assert!(m.store.get("action/res2/block0/conv1/weight").is_none());
        let mut s = m.session(Mode::Train);
        let x = s.tape.constant(uniform(&[3, 3, 32, 32], 1, -1.0, 1.0));
        let o = m.forward(&mut s, x, ForwardOptions::default()).unwrap();
        assert_eq!(s.tape.shape(o.action_logits), &[1, 4]);
        assert_eq!(o.stages.len(), 3);
    }
}
