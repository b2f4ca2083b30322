//! Central-difference verification of reverse-mode gradients.
//!
//! A [`GradSubject`] is a scalar function of a list of `f64` tensors that can
//! also report its own gradient. [`grad_check`] perturbs coordinates one at a
//! time and compares `(f(x+eps) - f(x-eps)) / (2 eps)` against the reported
//! gradient using `|a - b| / max(|a|, |b|, 1e-8)`.
//!
//! Coordinates whose perturbation flips any ReLU are counted as skipped
//! rather than compared: the difference quotient straddles a kink there.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Mode, ParamStore, Session};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_MAX_COORDS: usize = 10_000;
const REL_FLOOR: f64 = 1e-8;
/// Rounding slack, in units of machine epsilon times `|f|`, allowed in a
/// single function evaluation when estimating finite-difference resolution.
pub const NOISE_ULPS: f64 = 64.0;

pub struct Evaluation {
    pub value: f64,
    pub kink_signature: u64,
    pub gradient: Option<Vec<Tensor<f64>>>,
}

pub trait GradSubject {
    fn name(&self) -> &str;

    /// The point at which gradients are compared.
    fn point(&self) -> Vec<Tensor<f64>>;

    fn evaluate(&self, point: &[Tensor<f64>], with_gradient: bool) -> Result<Evaluation>;
}

/// Subject defined by a closure that records its computation on a tape.
pub struct TapeSubject<F> {
    name: String,
    point: Vec<Tensor<f64>>,
    f: F,
}

impl<F> TapeSubject<F>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    pub fn new(name: impl Into<String>, point: Vec<Tensor<f64>>, f: F) -> Self {
        TapeSubject {
            name: name.into(),
            point,
            f,
        }
    }
}

impl<F> GradSubject for TapeSubject<F>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn point(&self) -> Vec<Tensor<f64>> {
        self.point.clone()
    }

    fn evaluate(&self, point: &[Tensor<f64>], with_gradient: bool) -> Result<Evaluation> {
        let mut tape = Tape::with_kink_tracking();
        let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = (self.f)(&mut tape, &vars)?;
        let value = tape.value(out).item();
        let gradient = if with_gradient {
            let grads = tape.backward(out)?;
            Some(
                vars.iter()
                    .zip(point)
                    .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                    .collect(),
            )
        } else {
            None
        };
        Ok(Evaluation {
            value,
            kink_signature: tape.kink_signature(),
            gradient,
        })
    }
}

/// Subject whose leaves are some free inputs followed by every trainable
/// entry of a parameter store, in registration order.
pub struct SessionSubject<F> {
    name: String,
    store: ParamStore<f64>,
    inputs: Vec<Tensor<f64>>,
    mode: Mode,
    f: F,
}

impl<F> SessionSubject<F>
where
    F: Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var>,
{
    pub fn new(name: impl Into<String>, store: ParamStore<f64>, inputs: Vec<Tensor<f64>>, mode: Mode, f: F) -> Self {
        SessionSubject {
            name: name.into(),
            store,
            inputs,
            mode,
            f,
        }
    }
}

impl<F> GradSubject for SessionSubject<F>
where
    F: Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var>,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn point(&self) -> Vec<Tensor<f64>> {
        let mut p = self.inputs.clone();
        p.extend(
            self.store
                .param_indices()
                .into_iter()
                .map(|i| self.store.entry(i).tensor.clone()),
        );
        p
    }

    fn evaluate(&self, point: &[Tensor<f64>], with_gradient: bool) -> Result<Evaluation> {
        let n_in = self.inputs.len();
        let params = self.store.param_indices();
        let mut store = self.store.clone();
        for (k, &i) in params.iter().enumerate() {
            store.entry_mut(i).tensor = point[n_in + k].clone();
        }
        let mut s = Session::with_tape(&store, self.mode, Tape::with_kink_tracking());
        let xs: Vec<Var> = point[..n_in].iter().map(|t| s.tape.leaf(t.clone(), true)).collect();
        let out = (self.f)(&mut s, &xs)?;
        let value = s.tape.value(out).item();
        let gradient = if with_gradient {
            let mut grads = s.tape.backward(out)?;
            let mut g: Vec<Tensor<f64>> = xs
                .iter()
                .zip(&point[..n_in])
                .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            for &i in &params {
                let shape = store.entry(i).tensor.shape();
                g.push(
                    s.bound_var(i)
                        .and_then(|v| grads.take(v))
                        .unwrap_or_else(|| Tensor::zeros(shape)),
                );
            }
            Some(g)
        } else {
            None
        };
        Ok(Evaluation {
            value,
            kink_signature: s.tape.kink_signature(),
            gradient,
        })
    }
}

/// Wraps a subject and corrupts one coordinate of its reported gradient.
/// Used to confirm the harness catches and locates a wrong adjoint.
pub struct FaultySubject<S> {
    pub inner: S,
    pub leaf: usize,
    pub index: usize,
    pub delta: f64,
}

impl<S: GradSubject> GradSubject for FaultySubject<S> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn point(&self) -> Vec<Tensor<f64>> {
        self.inner.point()
    }

    fn evaluate(&self, point: &[Tensor<f64>], with_gradient: bool) -> Result<Evaluation> {
        let mut e = self.inner.evaluate(point, with_gradient)?;
        if let Some(g) = e.gradient.as_mut() {
            g[self.leaf].data_mut()[self.index] += self.delta;
        }
        Ok(e)
    }
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Above this many coordinates, a seeded random subset of this size is
    /// checked instead of all of them.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            eps: DEFAULT_EPS,
            tolerance: DEFAULT_TOLERANCE,
            max_coords: DEFAULT_MAX_COORDS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coordinate {
    pub leaf: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub total_coords: usize,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Coordinates whose relative error exceeded the tolerance only because
    /// the true derivative is below what central differences can resolve;
    /// they agree within [`fd_resolution`] and are left out of
    /// `max_rel_error`.
    pub resolution_limited: usize,
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= self.tolerance
    }
}

/// Absolute accuracy of a central difference: each evaluation carries
/// rounding of order `ε·|f|`, amplified by `1 / (2·eps)`.
pub fn fd_resolution(f_plus: f64, f_minus: f64, eps: f64) -> f64 {
    NOISE_ULPS * f64::EPSILON * f_plus.abs().max(f_minus.abs()).max(1.0) / (2.0 * eps)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn grad_check(subject: &dyn GradSubject, options: &CheckOptions) -> Result<CheckReport> {
    let point = subject.point();
    let base = subject.evaluate(&point, true)?;
    if !base.value.is_finite() {
        return Err(Error::Numeric(format!(
            "{}: value at the base point is {}",
            subject.name(),
            base.value
        )));
    }
    let gradient = base.gradient.expect("gradient requested");
    let offsets: Vec<usize> = point
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.len();
            Some(o)
        })
        .collect();
    let total: usize = point.iter().map(Tensor::len).sum();
    let mut coords: Vec<usize> = if total > options.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        sample(&mut rng, total, options.max_coords).into_vec()
    } else {
        (0..total).collect()
    };
    coords.sort_unstable();

    let mut report = CheckReport {
        name: subject.name().to_string(),
        total_coords: total,
        checked: 0,
        skipped_kinks: 0,
        resolution_limited: 0,
        max_rel_error: 0.0,
        worst: None,
        tolerance: options.tolerance,
    };
    let mut probe = point.clone();
    for flat in coords {
        let leaf = offsets.partition_point(|&o| o <= flat) - 1;
        let index = flat - offsets[leaf];
        let x0 = point[leaf].data()[index];
        probe[leaf].data_mut()[index] = x0 + options.eps;
        let plus = subject.evaluate(&probe, false)?;
        probe[leaf].data_mut()[index] = x0 - options.eps;
        let minus = subject.evaluate(&probe, false)?;
        probe[leaf].data_mut()[index] = x0;
        if !plus.value.is_finite() || !minus.value.is_finite() {
            return Err(Error::Numeric(format!(
                "{}: non-finite value perturbing leaf {leaf} index {index}",
                subject.name()
            )));
        }
        if plus.kink_signature != base.kink_signature || minus.kink_signature != base.kink_signature {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * options.eps);
        let analytic = gradient[leaf].data()[index];
        if !analytic.is_finite() {
            return Err(Error::Numeric(format!(
                "{}: non-finite gradient at leaf {leaf} index {index}",
                subject.name()
            )));
        }
        let rel = relative_error(analytic, numeric);
        report.checked += 1;
        if rel > options.tolerance && (analytic - numeric).abs() <= fd_resolution(plus.value, minus.value, options.eps)
        {
            report.resolution_limited += 1;
            continue;
        }
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(Coordinate {
                leaf,
                index,
                analytic,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(report)
}
