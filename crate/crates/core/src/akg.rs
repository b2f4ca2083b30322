//! Action knowledge graph: relation reasoning over pooled branch features.
//!
//! Each video contributes `N = 3·n_seg` nodes ordered action, scene, human
//! (each group in segment order). Pairwise relation scores are masked and
//! row-normalized with a softmax, one graph convolution `σ(G·X·W)` mixes the
//! nodes, and only the action rows are kept for classification.
//!
//! All functions operate on batched node matrices `[V, N, d]`: one graph per
//! video.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{he_normal, EntryKind, ParamStore, Session};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    /// `x_aᵀ x_b`; parameter-free.
    Dot,
    /// `θ(x_a)ᵀ φ(x_b)`.
    EmbeddedDot,
    /// `ReLU(w · [θ(x_a), φ(x_b)])`.
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Only scene–human edges are removed.
    SceneHumanBlocked,
    /// Only edges with at least one action endpoint are kept.
    ActionIncident,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Action,
    Scene,
    Human,
}

/// Role of node `index` in a graph with `n_seg` segments.
pub fn role(index: usize, n_seg: usize) -> Role {
    match index / n_seg {
        0 => Role::Action,
        1 => Role::Scene,
        2 => Role::Human,
        _ => panic!("node {index} out of range for {n_seg} segments"),
    }
}

/// Binary `N×N` edge mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMask {
    n_seg: usize,
    cells: Rc<[bool]>,
}

impl EdgeMask {
    pub fn new(n_seg: usize, kind: MaskKind) -> Self {
        assert!(n_seg >= 1, "n_seg must be positive");
        let n = 3 * n_seg;
        let cells = (0..n * n)
            .map(|ix| {
                let (ra, rb) = (role(ix / n, n_seg), role(ix % n, n_seg));
                match kind {
                    MaskKind::SceneHumanBlocked => {
                        !matches!((ra, rb), (Role::Scene, Role::Human) | (Role::Human, Role::Scene))
                    }
                    MaskKind::ActionIncident => ra == Role::Action || rb == Role::Action,
                }
            })
            .collect();
        EdgeMask { n_seg, cells }
    }

    pub fn nodes(&self) -> usize {
        3 * self.n_seg
    }

    pub fn n_seg(&self) -> usize {
        self.n_seg
    }

    pub fn get(&self, a: usize, b: usize) -> bool {
        self.cells[a * self.nodes() + b]
    }

    pub fn cells(&self) -> Rc<[bool]> {
        self.cells.clone()
    }

    pub fn zero_count(&self) -> usize {
        self.cells.iter().filter(|&&c| !c).count()
    }
}

/// The default mask: scene–human edges off, everything else on.
pub fn edge_mask(n_seg: usize) -> EdgeMask {
    EdgeMask::new(n_seg, MaskKind::SceneHumanBlocked)
}

/// Stacks three `[V, n_seg, d]` groups into `[V, 3·n_seg, d]` in role order.
pub fn build_nodes<T: Scalar>(tape: &mut Tape<T>, action: Var, scene: Var, human: Var) -> Result<Var> {
    let a = tape.shape(action).to_vec();
    if a.len() != 3 {
        return Err(Error::shape("node group rank", &[0, 0, 0], &a));
    }
    for g in [scene, human] {
        if tape.shape(g) != a.as_slice() {
            return Err(Error::shape("node groups", &a, tape.shape(g)));
        }
    }
    tape.concat(&[action, scene, human], 1)
}

/// Tape handles for the relation function's parameters.
#[derive(Debug, Clone, Copy)]
pub struct RelationVars {
    pub kind: RelationKind,
    /// `d × d_e`
    pub theta: Option<Var>,
    /// `d × d_e`
    pub phi: Option<Var>,
    /// `2·d_e × 1`; first half weighs `θ(x_a)`, second half `φ(x_b)`.
    pub w_cat: Option<Var>,
}

impl RelationVars {
    pub fn dot() -> Self {
        RelationVars {
            kind: RelationKind::Dot,
            theta: None,
            phi: None,
            w_cat: None,
        }
    }
}

fn need(v: Option<Var>, what: &str) -> Result<Var> {
    v.ok_or_else(|| Error::config(what, "missing for this relation kind"))
}

/// `S[v, a, b] = f(x_a, x_b)` for every ordered pair including self-pairs.
pub fn relation_scores<T: Scalar>(tape: &mut Tape<T>, x: Var, rel: &RelationVars) -> Result<Var> {
    match rel.kind {
        RelationKind::Dot => tape.matmul(x, x, true),
        RelationKind::EmbeddedDot => {
            let a = tape.matmul(x, need(rel.theta, "theta")?, false)?;
            let b = tape.matmul(x, need(rel.phi, "phi")?, false)?;
            tape.matmul(a, b, true)
        }
        RelationKind::Concat => {
            let a = tape.matmul(x, need(rel.theta, "theta")?, false)?;
            let b = tape.matmul(x, need(rel.phi, "phi")?, false)?;
            let w = need(rel.w_cat, "w_cat")?;
            let de = tape.shape(a)[2];
            if tape.shape(w) != [2 * de, 1] {
                return Err(Error::shape("w_cat", &[2 * de, 1], tape.shape(w)));
            }
            let w_left = tape.slice(w, 0, 0, de)?;
            let w_right = tape.slice(w, 0, de, de)?;
            let (v, n) = (tape.shape(a)[0], tape.shape(a)[1]);
            let u = tape.matmul(a, w_left, false)?;
            let u = tape.reshape(u, &[v, n])?;
            let r = tape.matmul(b, w_right, false)?;
            let r = tape.reshape(r, &[v, n])?;
            let s = tape.outer_sum(u, r)?;
            Ok(tape.relu(s))
        }
    }
}

/// Masked row softmax: masked entries are exactly zero and each row's
/// active entries sum to one.
pub fn normalize_graph<T: Scalar>(tape: &mut Tape<T>, scores: Var, mask: &EdgeMask) -> Result<Var> {
    let s = tape.shape(scores);
    let n = mask.nodes();
    if s.len() != 3 || s[1] != n || s[2] != n {
        return Err(Error::shape(
            "relation scores",
            &[s.first().copied().unwrap_or(0), n, n],
            s,
        ));
    }
    tape.masked_softmax(scores, mask.cells())
}

/// `Z = σ(G·X·W)`, same shape as `X`.
pub fn gcn_layer<T: Scalar>(tape: &mut Tape<T>, graph: Var, x: Var, w: Var, activation: Activation) -> Result<Var> {
    let gx = tape.matmul(graph, x, false)?;
    let z = tape.matmul(gx, w, false)?;
    Ok(match activation {
        Activation::Relu => tape.relu(z),
        Activation::Identity => z,
    })
}

/// Rows `[0, n_seg)` of each graph: the action nodes.
pub fn select_action_nodes<T: Scalar>(tape: &mut Tape<T>, z: Var, n_seg: usize) -> Result<Var> {
    let s = tape.shape(z);
    if s.len() != 3 || s[1] != 3 * n_seg {
        return Err(Error::shape(
            "graph output",
            &[s.first().copied().unwrap_or(0), 3 * n_seg],
            s,
        ));
    }
    tape.slice(z, 1, 0, n_seg)
}

/// Output of one graph-reasoning pass.
pub struct AkgOutput {
    pub graph: Var,
    pub z: Var,
    pub action: Var,
}

/// Relation scoring, normalization, and exactly one graph convolution.
pub fn reason<T: Scalar>(
    tape: &mut Tape<T>,
    nodes: Var,
    rel: &RelationVars,
    mask: &EdgeMask,
    gcn_weight: Var,
    activation: Activation,
) -> Result<AkgOutput> {
    let scores = relation_scores(tape, nodes, rel)?;
    let graph = normalize_graph(tape, scores, mask)?;
    let z = gcn_layer(tape, graph, nodes, gcn_weight, activation)?;
    let action = select_action_nodes(tape, z, mask.n_seg())?;
    Ok(AkgOutput { graph, z, action })
}

/// Embedding width of the projected relation functions.
pub fn embed_dim(d: usize) -> usize {
    (d / 2).max(1)
}

/// Registers `akg/relation/*` (as required by `kind`) and `akg/gcn/weight`.
///
/// The graph-convolution weight starts at the identity, so at step 0 the
/// layer is pure graph averaging.
pub fn register_params<T: Scalar>(store: &mut ParamStore<T>, kind: RelationKind, d: usize, seed: u64) -> Result<()> {
    let de = embed_dim(d);
    if kind != RelationKind::Dot {
        for name in ["akg/relation/theta", "akg/relation/phi"] {
            store.insert(name, EntryKind::Param, he_normal(&[d, de], d, seed, name))?;
        }
    }
    if kind == RelationKind::Concat {
        let name = "akg/relation/w_cat";
        store.insert(name, EntryKind::Param, he_normal(&[2 * de, 1], 2 * de, seed, name))?;
    }
    let mut eye = Tensor::zeros(&[d, d]);
    for i in 0..d {
        eye.data_mut()[i * d + i] = T::one();
    }
    store.insert("akg/gcn/weight", EntryKind::Param, eye)?;
    Ok(())
}

/// Binds the relation parameters registered by [`register_params`].
pub fn bind_relation<T: Scalar>(s: &mut Session<'_, T>, kind: RelationKind) -> Result<RelationVars> {
    let mut rel = RelationVars {
        kind,
        theta: None,
        phi: None,
        w_cat: None,
    };
    if kind != RelationKind::Dot {
        rel.theta = Some(s.param("akg/relation/theta")?);
        rel.phi = Some(s.param("akg/relation/phi")?);
    }
    if kind == RelationKind::Concat {
        rel.w_cat = Some(s.param("akg/relation/w_cat")?);
    }
    Ok(rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, CheckOptions, GradSubject, TapeSubject};
    use crate::testutil::uniform;

    fn consts(t: &mut Tape<f64>, shape: &[usize], v: &[f64]) -> Var {
        t.constant(Tensor::from_f64(shape, v).unwrap())
    }

    #[test]
    fn single_segment_nodes_stack_in_role_order() {
        let mut t = Tape::new();
        let a = consts(&mut t, &[1, 1, 2], &[1.0, 2.0]);
        let s = consts(&mut t, &[1, 1, 2], &[3.0, 4.0]);
        let h = consts(&mut t, &[1, 1, 2], &[5.0, 6.0]);
        let x = build_nodes(&mut t, a, s, h).unwrap();
        assert_eq!(t.value(x).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(role(4, 3), Role::Scene);
        assert_eq!(role(2, 3), Role::Action);
        assert_eq!(role(8, 3), Role::Human);
    }

    #[test]
    fn mismatched_groups_are_rejected() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::zeros(&[1, 3, 4]));
        let s = t.constant(Tensor::zeros(&[1, 3, 5]));
        assert!(matches!(build_nodes(&mut t, a, s, a), Err(Error::Shape { .. })));
    }

    #[test]
    fn mask_zero_pattern() {
        let m1 = edge_mask(1);
        let zeros: Vec<(usize, usize)> = (0..3)
            .flat_map(|a| (0..3).map(move |b| (a, b)))
            .filter(|&(a, b)| !m1.get(a, b))
            .collect();
        assert_eq!(zeros, vec![(1, 2), (2, 1)]);

        let m3 = edge_mask(3);
        assert_eq!(m3.zero_count(), 18);
        for a in 0..9 {
            for b in 0..9 {
                let blocked = (3..6).contains(&a) && (6..9).contains(&b) || (6..9).contains(&a) && (3..6).contains(&b);
                assert_eq!(m3.get(a, b), !blocked);
            }
        }
    }

    #[test]
    fn masks_are_symmetric_with_open_action_rows() {
        for n_seg in 1..=6 {
            for kind in [MaskKind::SceneHumanBlocked, MaskKind::ActionIncident] {
                let m = EdgeMask::new(n_seg, kind);
                for a in 0..m.nodes() {
                    for b in 0..m.nodes() {
                        assert_eq!(m.get(a, b), m.get(b, a));
                    }
                    for i in 0..n_seg {
                        assert!(m.get(i, a) && m.get(a, i));
                    }
                }
            }
        }
        // the strict variant also drops scene–scene and human–human edges
        let strict = EdgeMask::new(2, MaskKind::ActionIncident);
        assert!(!strict.get(2, 3) && !strict.get(4, 4) && strict.get(0, 5));
    }

    #[test]
    fn dot_relation_arithmetic() {
        let mut t = Tape::new();
        let x = consts(&mut t, &[1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
        let s = relation_scores(&mut t, x, &RelationVars::dot()).unwrap();
        assert_eq!(t.value(s).at(&[0, 0, 1]), 11.0);
        assert_eq!(t.value(s).at(&[0, 1, 0]), 11.0);
        assert_eq!(t.value(s).at(&[0, 1, 1]), 25.0);
    }

    #[test]
    fn embedded_dot_with_identity_projections_equals_dot() {
        let mut t = Tape::new();
        let x = t.constant(uniform(&[2, 6, 4], 1, -1.0, 1.0));
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 5] = 1.0;
        }
        let theta = t.constant(eye.clone());
        let phi = t.constant(eye);
        let rel = RelationVars {
            kind: RelationKind::EmbeddedDot,
            theta: Some(theta),
            phi: Some(phi),
            w_cat: None,
        };
        let a = relation_scores(&mut t, x, &rel).unwrap();
        let b = relation_scores(&mut t, x, &RelationVars::dot()).unwrap();
        assert!(t.value(a).max_abs_diff(t.value(b)) < 1e-12);
    }

    #[test]
    fn concat_with_zero_projection_scores_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(uniform(&[1, 6, 4], 2, -1.0, 1.0));
        let theta = t.constant(uniform(&[4, 2], 3, -1.0, 1.0));
        let phi = t.constant(uniform(&[4, 2], 4, -1.0, 1.0));
        let w = t.constant(Tensor::zeros(&[4, 1]));
        let rel = RelationVars {
            kind: RelationKind::Concat,
            theta: Some(theta),
            phi: Some(phi),
            w_cat: Some(w),
        };
        let s = relation_scores(&mut t, x, &rel).unwrap();
        assert_eq!(t.shape(s), &[1, 6, 6]);
        assert!(t.value(s).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_scores_spread_evenly_over_active_edges() {
        let mask = edge_mask(2);
        let mut t = Tape::new();
        let s = t.constant(Tensor::full(&[1, 6, 6], 0.37));
        let g = normalize_graph(&mut t, s, &mask).unwrap();
        for a in 0..6 {
            let k = (0..6).filter(|&b| mask.get(a, b)).count() as f64;
            for b in 0..6 {
                let want = if mask.get(a, b) { 1.0 / k } else { 0.0 };
                assert!((t.value(g).at(&[0, a, b]) - want).abs() < 1e-12);
            }
        }
    }

    /// Softmax evaluated directly from its definition on the masked row.
    fn softmax_oracle(row: &[f64], active: &[bool]) -> Vec<f64> {
        let denom: f64 = row.iter().zip(active).filter(|(_, &m)| m).map(|(v, _)| v.exp()).sum();
        row.iter()
            .zip(active)
            .map(|(v, &m)| if m { v.exp() / denom } else { 0.0 })
            .collect()
    }

    #[test]
    fn single_segment_worked_example() {
        // x_act = (1,0), x_scn = (0,1), x_hum = (1,1)
        let xs = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let mask = edge_mask(1);
        let mut oracle = Vec::new();
        for a in 0..3 {
            let row: Vec<f64> = (0..3).map(|b| xs[a][0] * xs[b][0] + xs[a][1] * xs[b][1]).collect();
            let active: Vec<bool> = (0..3).map(|b| mask.get(a, b)).collect();
            oracle.push(softmax_oracle(&row, &active));
        }
        // frozen from the oracle above
        let frozen = [
            [0.4223188, 0.1553624, 0.4223188],
            [0.2689414, 0.7310586, 0.0],
            [0.2689414, 0.0, 0.7310586],
        ];
        let mut t = Tape::new();
        let x = consts(&mut t, &[1, 3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let s = relation_scores(&mut t, x, &RelationVars::dot()).unwrap();
        let g = normalize_graph(&mut t, s, &mask).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let v = t.value(g).at(&[0, a, b]);
                assert!((v - oracle[a][b]).abs() < 1e-12);
                assert!((v - frozen[a][b]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mask = edge_mask(2);
        let s0 = uniform::<f64>(&[1, 6, 6], 5, -3.0, 3.0);
        let mut t = Tape::new();
        let a = t.constant(s0.clone());
        let b = t.constant(s0.map(|v| v + 123.0));
        let ga = normalize_graph(&mut t, a, &mask).unwrap();
        let gb = normalize_graph(&mut t, b, &mask).unwrap();
        assert!(t.value(ga).max_abs_diff(t.value(gb)) < 1e-6);
    }

    #[test]
    fn gcn_identity_case_and_relu_range() {
        let mut t = Tape::new();
        let x0 = uniform::<f64>(&[1, 6, 3], 6, -1.0, 1.0);
        let x = t.constant(x0.clone());
        let mut eye6 = Tensor::zeros(&[1, 6, 6]);
        for i in 0..6 {
            eye6.data_mut()[i * 7] = 1.0;
        }
        let mut eye3 = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye3.data_mut()[i * 4] = 1.0;
        }
        let g = t.constant(eye6);
        let w = t.constant(eye3);
        let z = gcn_layer(&mut t, g, x, w, Activation::Identity).unwrap();
        assert_eq!(t.value(z), &x0);
        let zr = gcn_layer(&mut t, g, x, w, Activation::Relu).unwrap();
        assert!(t.value(zr).data().iter().all(|&v| v >= 0.0));
        // identity pipeline returns the action vectors
        let act = select_action_nodes(&mut t, z, 2).unwrap();
        assert_eq!(t.value(act).data(), &x0.data()[..6]);
    }

    #[test]
    fn gcn_matches_triple_loop() {
        let (n, d) = (6, 4);
        let g0 = uniform::<f64>(&[1, n, n], 7, 0.0, 1.0);
        let x0 = uniform::<f64>(&[1, n, d], 8, -1.0, 1.0);
        let w0 = uniform::<f64>(&[d, d], 9, -1.0, 1.0);
        let mut t = Tape::new();
        let (g, x, w) = (t.constant(g0.clone()), t.constant(x0.clone()), t.constant(w0.clone()));
        let z = gcn_layer(&mut t, g, x, w, Activation::Identity).unwrap();
        for i in 0..n {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..n {
                    for l in 0..d {
                        s += g0.at(&[0, i, k]) * x0.at(&[0, k, l]) * w0.at(&[l, j]);
                    }
                }
                assert!((t.value(z).at(&[0, i, j]) - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn select_rows_in_order() {
        let mut t = Tape::new();
        let z = consts(&mut t, &[1, 9, 1], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let a = select_action_nodes(&mut t, z, 3).unwrap();
        assert_eq!(t.value(a).data(), &[0.0, 1.0, 2.0]);
    }

    fn reasoning_subject(
        kind: RelationKind,
        activation: Activation,
    ) -> TapeSubject<impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>> {
        let (v, n_seg, d) = (2, 2, 4);
        let de = embed_dim(d);
        let point = vec![
            uniform(&[v, n_seg, d], 10, -1.0, 1.0),
            uniform(&[v, n_seg, d], 11, -1.0, 1.0),
            uniform(&[v, n_seg, d], 12, -1.0, 1.0),
            uniform(&[d, de], 13, -1.0, 1.0),
            uniform(&[d, de], 14, -1.0, 1.0),
            uniform(&[2 * de, 1], 15, -1.0, 1.0),
            uniform(&[d, d], 16, -1.0, 1.0),
        ];
        let mask = edge_mask(n_seg);
        TapeSubject::new(format!("akg/{kind:?}"), point, move |t, p| {
            let x = build_nodes(t, p[0], p[1], p[2])?;
            let rel = RelationVars {
                kind,
                theta: Some(p[3]),
                phi: Some(p[4]),
                w_cat: Some(p[5]),
            };
            let out = reason(t, x, &rel, &mask, p[6], activation)?;
            let w = uniform(t.shape(out.action), 17, -1.0, 1.0);
            t.dot_const(out.action, &w)
        })
    }

    #[test]
    fn whole_graph_gradients_for_every_relation() {
        for kind in [RelationKind::Dot, RelationKind::EmbeddedDot, RelationKind::Concat] {
            for act in [Activation::Identity, Activation::Relu] {
                let r = grad_check(&reasoning_subject(kind, act), &CheckOptions::default()).unwrap();
                assert!(r.passed(), "{kind:?}/{act:?}: {} at {:?}", r.max_rel_error, r.worst);
            }
        }
    }

    #[test]
    fn scene_features_reach_action_rows() {
        let subject = reasoning_subject(RelationKind::Dot, Activation::Identity);
        let e = subject.evaluate(&subject.point(), true).unwrap();
        let g = e.gradient.unwrap();
        assert!(g[1].data().iter().any(|v| v.abs() > 1e-6));
        assert!(g[2].data().iter().any(|v| v.abs() > 1e-6));
    }
}
