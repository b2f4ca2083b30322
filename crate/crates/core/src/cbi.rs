//! Cross branch integration: scene and human maps modulate the action map.
//!
//! ```text
//! g_s   = ReLU(BN(scene))
//! g_h   = ReLU(BN(human))
//! fused = action + action⊙g_s + action⊙g_h
//! out   = Conv1x1(concat(fused, scene, human)) + bias
//! ```
//!
//! The reduction starts at `[I | 0 | 0]` with zero bias, so a fresh module
//! passes the action map through unchanged when the auxiliary maps are zero.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{register_batch_norm, EntryKind, ParamStore, Session};
use crate::tensor::{Scalar, Tensor};

/// Registers `{prefix}/bn_scene`, `{prefix}/bn_human`, `{prefix}/reduce/weight`
/// (`[C, 3C, 1, 1]`) and `{prefix}/reduce/bias`.
pub fn register_params<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Result<()> {
    register_batch_norm(store, &format!("{prefix}/bn_scene"), channels)?;
    register_batch_norm(store, &format!("{prefix}/bn_human"), channels)?;
    store.insert(
        format!("{prefix}/reduce/weight"),
        EntryKind::Param,
        identity_reduction(channels),
    )?;
    store.insert(
        format!("{prefix}/reduce/bias"),
        EntryKind::Param,
        Tensor::zeros(&[channels]),
    )?;
    Ok(())
}

/// `[C, 3C, 1, 1]` weight with the identity on the first `C` input channels.
pub fn identity_reduction<T: Scalar>(channels: usize) -> Tensor<T> {
    let mut w = Tensor::zeros(&[channels, 3 * channels, 1, 1]);
    for c in 0..channels {
        w.data_mut()[c * 3 * channels + c] = T::one();
    }
    w
}

/// Intermediate values of one CBI pass, exposed for inspection.
pub struct CbiTrace {
    pub gate_scene: Var,
    pub gate_human: Var,
    pub fused: Var,
    pub output: Var,
}

pub fn cbi_forward<T: Scalar>(
    s: &mut Session<'_, T>,
    prefix: &str,
    action: Var,
    scene: Var,
    human: Var,
) -> Result<Var> {
    Ok(cbi_trace(s, prefix, action, scene, human)?.output)
}

pub fn cbi_trace<T: Scalar>(
    s: &mut Session<'_, T>,
    prefix: &str,
    action: Var,
    scene: Var,
    human: Var,
) -> Result<CbiTrace> {
    let shape = s.tape.shape(action).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!("{prefix} action map rank"), &[0, 0, 0, 0], &shape));
    }
    for (what, v) in [("scene", scene), ("human", human)] {
        if s.tape.shape(v) != shape.as_slice() {
            return Err(Error::shape(format!("{prefix} {what} map"), &shape, s.tape.shape(v)));
        }
    }
    let bs = s.batch_norm(&format!("{prefix}/bn_scene"), scene)?;
    let gate_scene = s.tape.relu(bs);
    let bh = s.batch_norm(&format!("{prefix}/bn_human"), human)?;
    let gate_human = s.tape.relu(bh);
    let ms = s.tape.mul(action, gate_scene)?;
    let mh = s.tape.mul(action, gate_human)?;
    let fused = s.tape.add(action, ms)?;
    let fused = s.tape.add(fused, mh)?;
    let cat = s.tape.concat(&[fused, scene, human], 1)?;
    let reduced = s.conv(&format!("{prefix}/reduce"), cat, 1, 0)?;
    let bias = s.param(&format!("{prefix}/reduce/bias"))?;
    let output = s.tape.channel_bias(reduced, bias)?;
    Ok(CbiTrace {
        gate_scene,
        gate_human,
        fused,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, CheckOptions, SessionSubject};
    use crate::params::Mode;
    use crate::testutil::{away_from_zero, uniform};

    fn fresh(channels: usize) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        register_params(&mut store, "cbi", channels).unwrap();
        store
    }

    #[test]
    fn zero_auxiliaries_pass_action_through_exactly() {
        for mode in [Mode::Train, Mode::Eval] {
            let store = fresh(4);
            let mut s = Session::new(&store, mode);
            let a0 = uniform::<f64>(&[2, 4, 5, 3], 1, -2.0, 2.0);
            let a = s.tape.constant(a0.clone());
            let z = s.tape.constant(Tensor::zeros(&[2, 4, 5, 3]));
            let out = cbi_forward(&mut s, "cbi", a, z, z).unwrap();
            assert_eq!(s.tape.value(out), &a0);
        }
    }

    #[test]
    fn output_shape_matches_action() {
        let store = fresh(64);
        let mut s = Session::new(&store, Mode::Eval);
        let xs: Vec<Var> = (0..3)
            .map(|i| s.tape.constant(uniform(&[2, 64, 14, 14], i, -1.0, 1.0)))
            .collect();
        let out = cbi_forward(&mut s, "cbi", xs[0], xs[1], xs[2]).unwrap();
        assert_eq!(s.tape.shape(out), &[2, 64, 14, 14]);
    }

    #[test]
    fn mismatched_maps_are_rejected() {
        let store = fresh(2);
        let mut s = Session::new(&store, Mode::Eval);
        let a = s.tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let b = s.tape.constant(Tensor::zeros(&[1, 2, 3, 4]));
        assert!(matches!(cbi_forward(&mut s, "cbi", a, b, a), Err(Error::Shape { .. })));
    }

    #[test]
    fn fused_equals_action_where_both_gates_vanish() {
        let store = fresh(3);
        let mut s = Session::new(&store, Mode::Eval);
        let a0 = uniform::<f64>(&[1, 3, 4, 4], 2, -1.0, 1.0);
        // sparse negative auxiliaries: BN in eval mode with fresh running
        // stats is nearly the identity, so negative inputs give zero gates
        let sparse = |seed| {
            let mut t = uniform::<f64>(&[1, 3, 4, 4], seed, 0.1, 1.0);
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                if i % 3 != 0 {
                    *v = -*v;
                }
            }
            t
        };
        let a = s.tape.constant(a0.clone());
        let sc = s.tape.constant(sparse(3));
        let hu = s.tape.constant(sparse(4));
        let tr = cbi_trace(&mut s, "cbi", a, sc, hu).unwrap();
        let gs = s.tape.value(tr.gate_scene).clone();
        let gh = s.tape.value(tr.gate_human).clone();
        let fused = s.tape.value(tr.fused);
        let mut checked = 0;
        for i in 0..a0.len() {
            if gs.data()[i] == 0.0 && gh.data()[i] == 0.0 {
                assert_eq!(fused.data()[i], a0.data()[i]);
                checked += 1;
            } else {
                let want = a0.data()[i] * (1.0 + gs.data()[i] + gh.data()[i]);
                assert!((fused.data()[i] - want).abs() < 1e-12);
            }
        }
        assert!(checked > 0);
    }

    pub(crate) fn cbi_subject(
        channels: usize,
        seed: u64,
        mode: Mode,
    ) -> SessionSubject<impl Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var>> {
        let mut store = fresh(channels);
        // move off the identity init so every block carries gradient
        store
            .set(
                "cbi/reduce/weight",
                uniform(&[channels, 3 * channels, 1, 1], seed + 10, -0.5, 0.5),
            )
            .unwrap();
        store
            .set("cbi/reduce/bias", uniform(&[channels], seed + 11, -0.5, 0.5))
            .unwrap();
        for name in ["cbi/bn_scene/gamma", "cbi/bn_human/gamma"] {
            store.set(name, uniform(&[channels], seed + 12, 0.5, 1.5)).unwrap();
        }
        let shape = [2, channels, 3, 3];
        let inputs = vec![
            uniform(&shape, seed, -1.0, 1.0),
            away_from_zero(&shape, seed + 1, 0.05),
            away_from_zero(&shape, seed + 2, 0.05),
        ];
        SessionSubject::new("cbi", store, inputs, mode, |s, x| {
            let out = cbi_forward(s, "cbi", x[0], x[1], x[2])?;
            let w = uniform(s.tape.shape(out), 99, -1.0, 1.0);
            s.tape.dot_const(out, &w)
        })
    }

    #[test]
    fn gradients_match_finite_differences() {
        for mode in [Mode::Eval, Mode::Train] {
            let subject = cbi_subject(3, 5, mode);
            let r = grad_check(&subject, &CheckOptions::default()).unwrap();
            assert!(r.passed(), "{mode:?}: {} at {:?}", r.max_rel_error, r.worst);
            assert!(r.checked > r.total_coords / 2);
        }
    }
}
