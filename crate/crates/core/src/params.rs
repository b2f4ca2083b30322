//! Named parameter registry and the per-forward-pass session that binds
//! parameters onto a tape.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    /// Trainable tensor.
    Param,
    /// Non-trainable state, e.g. batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry<T> {
    pub name: String,
    pub kind: EntryKind,
    pub tensor: Tensor<T>,
}

/// Ordered collection of uniquely named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: EntryKind, tensor: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(name, "duplicate parameter name"));
        }
        self.entries.push(Entry {
            name: name.clone(),
            kind,
            tensor,
        });
        self.index.insert(name, self.entries.len() - 1);
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.entries[i].tensor)
    }

    pub fn entry(&self, i: usize) -> &Entry<T> {
        &self.entries[i]
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut Entry<T> {
        &mut self.entries[i]
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    /// Indices of trainable entries, in registration order.
    pub fn param_indices(&self) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].kind == EntryKind::Param)
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    kind: e.kind,
                    tensor: e.tensor.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let current = self
            .get_mut(name)
            .ok_or_else(|| Error::config(name, "no such parameter"))?;
        if current.shape() != tensor.shape() {
            return Err(Error::shape(name, current.shape(), tensor.shape()));
        }
        *current = tensor;
        Ok(())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

/// Independent random stream for one named parameter. Keying by name keeps
/// a parameter's initial value independent of which other parameters exist.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

/// Independent stream for a keyed purpose, e.g. `(seed, video_id, epoch)`.
pub fn keyed_rng(seed: u64, key: &str, counter: u64) -> ChaCha8Rng {
    let mut z = seed ^ fnv1a(key.as_bytes()) ^ counter.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// He-style normal initialization with standard deviation `sqrt(2 / fan_in)`.
pub fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor<T> {
    normal_init(shape, (2.0 / fan_in as f64).sqrt(), seed, name)
}

/// Zero-mean normal initialization drawn from the `(seed, name)` stream.
pub fn normal_init<T: Scalar>(shape: &[usize], std: f64, seed: u64, name: &str) -> Tensor<T> {
    let mut rng = param_rng(seed, name);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::cast_from(z * std)
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Registers `{prefix}/gamma`, `{prefix}/beta` and their running statistics.
pub fn register_batch_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Result<()> {
    store.insert(
        format!("{prefix}/gamma"),
        EntryKind::Param,
        Tensor::full(&[channels], T::one()),
    )?;
    store.insert(format!("{prefix}/beta"), EntryKind::Param, Tensor::zeros(&[channels]))?;
    store.insert(
        format!("{prefix}/running_mean"),
        EntryKind::Buffer,
        Tensor::zeros(&[channels]),
    )?;
    store.insert(
        format!("{prefix}/running_var"),
        EntryKind::Buffer,
        Tensor::full(&[channels], T::one()),
    )?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are updated.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub mean_index: usize,
    pub var_index: usize,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// One forward pass: a tape plus lazily bound parameters.
///
/// Every parameter or buffer read goes through the session, which records
/// it; [`Session::touched`] exposes that record.
pub struct Session<'p, T: Scalar> {
    pub tape: Tape<T>,
    store: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    touched: Vec<bool>,
    mode: Mode,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'p, T: Scalar> Session<'p, T> {
    pub fn new(store: &'p ParamStore<T>, mode: Mode) -> Self {
        Self::with_tape(store, mode, Tape::new())
    }

    pub fn with_tape(store: &'p ParamStore<T>, mode: Mode, tape: Tape<T>) -> Self {
        Session {
            tape,
            store,
            bound: vec![None; store.len()],
            touched: vec![false; store.len()],
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    fn lookup(&mut self, name: &str) -> Result<usize> {
        let i = self
            .store
            .position(name)
            .ok_or_else(|| Error::config(name, "parameter not registered"))?;
        self.touched[i] = true;
        Ok(i)
    }

    /// Binds a trainable parameter onto the tape (once per session).
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let i = self.lookup(name)?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let v = self.tape.leaf(self.store.entry(i).tensor.clone(), true);
        self.bound[i] = Some(v);
        Ok(v)
    }

    pub fn buffer(&mut self, name: &str) -> Result<&'p Tensor<T>> {
        let i = self.lookup(name)?;
        Ok(&self.store.entry(i).tensor)
    }

    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}/gamma"))?;
        let beta = self.param(&format!("{prefix}/beta"))?;
        let mean_name = format!("{prefix}/running_mean");
        let var_name = format!("{prefix}/running_var");
        match self.mode {
            Mode::Train => {
                let mean_index = self.lookup(&mean_name)?;
                let var_index = self.lookup(&var_name)?;
                let (y, stats) = self.tape.batch_norm(x, gamma, beta, None)?;
                let (batch_mean, batch_var) = stats.expect("train mode yields statistics");
                self.bn_updates.push(BnUpdate {
                    mean_index,
                    var_index,
                    batch_mean,
                    batch_var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.buffer(&mean_name)?;
                let var = self.buffer(&var_name)?;
                let (y, _) = self.tape.batch_norm(x, gamma, beta, Some((mean.data(), var.data())))?;
                Ok(y)
            }
        }
    }

    pub fn conv(&mut self, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}/weight"))?;
        self.tape.conv2d(x, w, stride, pad)
    }

    pub fn touched(&self) -> impl Iterator<Item = &'p str> + '_ {
        let store = self.store;
        self.touched
            .iter()
            .enumerate()
            .filter(|(_, &t)| t)
            .map(move |(i, _)| store.entry(i).name.as_str())
    }

    /// Tape handle of a store entry, if this session has bound it.
    pub fn bound_var(&self, index: usize) -> Option<Var> {
        self.bound[index]
    }

    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    /// Gradients of `output` with respect to every bound parameter, as
    /// `(store index, gradient)`; parameters without a path to `output`
    /// get zeros.
    pub fn gradients(&self, output: Var) -> Result<Vec<(usize, Tensor<T>)>> {
        let mut grads = self.tape.backward(output)?;
        Ok(self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .map(|(i, v)| {
                let g = grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(self.store.entry(i).tensor.shape()));
                (i, g)
            })
            .collect())
    }

    pub fn into_bn_updates(self) -> Vec<BnUpdate<T>> {
        self.bn_updates
    }
}

/// Folds batch statistics into running averages:
/// `running = (1 - momentum) * running + momentum * batch`.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>], momentum: f64) {
    let m = T::cast_from(momentum);
    let keep = T::one() - m;
    for u in updates {
        for (index, batch) in [(u.mean_index, &u.batch_mean), (u.var_index, &u.batch_var)] {
            for (r, &b) in store.entry_mut(index).tensor.data_mut().iter_mut().zip(batch) {
                *r = keep * *r + m * b;
            }
        }
    }
}
