//! Tape-based reverse-mode differentiation over tensors.
//!
//! Every operation appends a node holding its forward value and enough
//! saved state to run its adjoint. [`Tape::backward`] walks the tape once in
//! reverse and returns gradients for every node that requires them.

mod kernels;

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, MatView, Scalar, Tensor};

use kernels::ConvGeom;

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    ChannelBias {
        x: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        invstd: Vec<T>,
        train: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Mean {
        x: Var,
        axis: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    MaskedSoftmax {
        x: Var,
        mask: Rc<[bool]>,
    },
    OuterSum {
        u: Var,
        v: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    WeightedSum(Vec<(Var, T)>),
    DotConst {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Splits a shape around `axis` into `(outer, axis extent, inner)`.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x100_0000_01b3).rotate_left(17)
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    track_kinks: bool,
    kink_signature: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            track_kinks: false,
            kink_signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    /// A tape that fingerprints the active side of every ReLU, so gradient
    /// checks can detect perturbations that cross a kink.
    pub fn with_kink_tracking() -> Self {
        Tape {
            track_kinks: true,
            ..Self::new()
        }
    }

    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 2-D convolution without bias. `x: [B, Ci, H, W]`, `w: [Co, Ci, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)
            .ok_or_else(|| Error::shape("conv2d input vs weight", self.shape(w), self.shape(x)))?;
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let value = Tensor::new(&[geom.batch, geom.c_out, geom.h_out, geom.w_out], out)?;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(value, Op::Conv2d { x, w, geom }, rg))
    }

    /// Adds `b[c]` to every element of channel `c` of `x: [B, C, ...]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(b) != [xs[1]] {
            return Err(Error::shape("channel bias", &xs[1..2.min(xs.len())], self.shape(b)));
        }
        let (outer, c, inner) = around(&xs, 1);
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for (ci, &bv) in bias.iter().enumerate() {
                let base = (o * c + ci) * inner;
                for v in &mut out[base..base + inner] {
                    *v += bv;
                }
            }
        }
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(Tensor::new(&xs, out)?, Op::ChannelBias { x, b }, rg))
    }

    /// Batch normalization over all axes but 1.
    ///
    /// With `running = None` batch statistics are used and returned as
    /// `(mean, unbiased variance)` so the caller can update its running
    /// averages; otherwise the given `(mean, variance)` are treated as
    /// constants.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("batch norm input rank", &[0, 0], &xs));
        }
        let (batch, c, spatial) = around(&xs, 1);
        for (name, p) in [("batch norm gamma", gamma), ("batch norm beta", beta)] {
            if self.shape(p) != [c] {
                return Err(Error::shape(name, &[c], self.shape(p)));
            }
        }
        let eps = T::cast_from(BN_EPS);
        let xv = self.value(x).data();
        let (mean, var, stats) = match running {
            None => {
                let (m, v) = kernels::channel_stats(xv, batch, c, spatial);
                let n = batch * spatial;
                let unbiased = if n > 1 {
                    let f = T::cast_from(n as f64 / (n - 1) as f64);
                    v.iter().map(|&x| x * f).collect()
                } else {
                    v.clone()
                };
                let stats = Some((m.clone(), unbiased));
                (m, v, stats)
            }
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batch norm running stats", &[c], &[m.len()]));
                }
                (m.to_vec(), v.to_vec(), None)
            }
        };
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for ci in 0..c {
                let base = (b * c + ci) * spatial;
                for i in base..base + spatial {
                    let h = (xv[i] - mean[ci]) * invstd[ci];
                    xhat[i] = h;
                    out[i] = g[ci] * h + bt[ci];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            invstd,
            train: running.is_none(),
        };
        Ok((self.push(Tensor::new(&xs, out)?, op, rg), stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        if self.track_kinks {
            let mut h = self.kink_signature;
            for (i, v) in self.value(x).data().iter().enumerate() {
                if *v > T::zero() {
                    h = mix(h, i as u64);
                }
            }
            self.kink_signature = mix(h, self.nodes.len() as u64);
        }
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(what, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat axis", &[first.len()], &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same_rank = s.len() == first.len();
            if !same_rank || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::shape("concat operands", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = around(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let rg = self.any_grad(inputs);
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        Ok(self.push(Tensor::new(&shape, out)?, op, rg))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(Error::shape("slice range", &xs, &[axis, start, len]));
        }
        let (outer, n, inner) = around(&xs, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = xs.clone();
        shape[axis] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || xs[axis] == 0 {
            return Err(Error::shape("mean axis", &xs, &[axis]));
        }
        let (outer, n, inner) = around(&xs, axis);
        let d = self.value(x).data();
        let inv = T::one() / T::cast_from(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..n {
                let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (a, &b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
            for a in dst.iter_mut() {
                *a = *a * inv;
            }
        }
        let mut shape = xs.clone();
        shape.remove(axis);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mean { x, axis }, rg))
    }

    /// Matrix product over the last two axes of `a`.
    ///
    /// A rank-2 `b` is shared by every leading index of `a`; a higher-rank
    /// `b` must carry the same leading axes (batched product). With
    /// `trans_b` the last two axes of `b` are read transposed.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() < 2 || bs.len() < 2 {
            return Err(Error::shape("matmul rank", &[2], &[as_.len().min(bs.len())]));
        }
        let (m, k) = (as_[as_.len() - 2], as_[as_.len() - 1]);
        let (br, bc) = (bs[bs.len() - 2], bs[bs.len() - 1]);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape("matmul inner dimension", &[k], &[kb]));
        }
        let batch: usize = as_[..as_.len() - 2].iter().product();
        let shared = bs.len() == 2;
        if !shared && bs[..bs.len() - 2] != as_[..as_.len() - 2] {
            return Err(Error::shape(
                "matmul batch axes",
                &as_[..as_.len() - 2],
                &bs[..bs.len() - 2],
            ));
        }
        let bview = if trans_b {
            MatView::new(br, bc).t()
        } else {
            MatView::new(br, bc)
        };
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        if shared {
            matmul_into(ad, MatView::new(batch * m, k), bd, bview, &mut out, T::one(), T::zero());
        } else {
            for i in 0..batch {
                matmul_into(
                    &ad[i * m * k..(i + 1) * m * k],
                    MatView::new(m, k),
                    &bd[i * br * bc..(i + 1) * br * bc],
                    bview,
                    &mut out[i * m * n..(i + 1) * m * n],
                    T::one(),
                    T::zero(),
                );
            }
        }
        let mut shape = as_.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    /// Row softmax over the last axis restricted to entries where `mask` is
    /// true. `x: [..., R, C]`, `mask: R·C` row-major. Masked entries are
    /// exactly zero.
    ///
    /// Panics if a mask row has no active entry.
    pub fn masked_softmax(&mut self, x: Var, mask: Rc<[bool]>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || xs[xs.len() - 2] * xs[xs.len() - 1] != mask.len() {
            return Err(Error::shape("masked softmax mask", &xs, &[mask.len()]));
        }
        let cols = xs[xs.len() - 1];
        let rows_in_mask = mask.len() / cols;
        for r in 0..rows_in_mask {
            assert!(
                mask[r * cols..(r + 1) * cols].iter().any(|&m| m),
                "mask row {r} has no active entry"
            );
        }
        let d = self.value(x).data();
        let mut out = vec![T::zero(); d.len()];
        for (row_ix, (src, dst)) in d.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let mrow = &mask[(row_ix % rows_in_mask) * cols..(row_ix % rows_in_mask + 1) * cols];
            let mut max = T::neg_infinity();
            for (v, &m) in src.iter().zip(mrow) {
                if m && *v > max {
                    max = *v;
                }
            }
            let mut sum = T::zero();
            for ((o, &v), &m) in dst.iter_mut().zip(src).zip(mrow) {
                if m {
                    *o = (v - max).exp();
                    sum += *o;
                }
            }
            for o in dst.iter_mut() {
                *o = *o / sum;
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&xs, out)?, Op::MaskedSoftmax { x, mask }, rg))
    }

    /// `out[b, i, j] = u[b, i] + v[b, j]`.
    pub fn outer_sum(&mut self, u: Var, v: Var) -> Result<Var> {
        let us = self.shape(u).to_vec();
        let vs = self.shape(v).to_vec();
        if us.len() != 2 || vs.len() != 2 || us[0] != vs[0] {
            return Err(Error::shape("outer sum", &us, &vs));
        }
        let (b, n, m) = (us[0], us[1], vs[1]);
        let ud = self.value(u).data();
        let vd = self.value(v).data();
        let mut out = Vec::with_capacity(b * n * m);
        for bi in 0..b {
            for i in 0..n {
                for j in 0..m {
                    out.push(ud[bi * n + i] + vd[bi * m + j]);
                }
            }
        }
        let rg = self.any_grad(&[u, v]);
        Ok(self.push(Tensor::new(&[b, n, m], out)?, Op::OuterSum { u, v }, rg))
    }

    /// Mean softmax cross-entropy. `logits: [B, K]` or `[B, K, P]` (class
    /// axis 1, `P` positions); `labels` has `B·P` entries, row-major.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() < 2 {
            return Err(Error::shape("cross entropy logits rank", &[2], &[ls.len()]));
        }
        let (b, k, p) = around(&ls, 1);
        if labels.len() != b * p {
            return Err(Error::shape("cross entropy labels", &[b * p], &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Validation(format!("label {bad} out of range for {k} classes")));
        }
        let d = self.value(logits).data();
        let mut probs = vec![T::zero(); d.len()];
        let mut total = 0.0f64;
        for bi in 0..b {
            for pi in 0..p {
                let at = |c: usize| (bi * k + c) * p + pi;
                let mut max = T::neg_infinity();
                for c in 0..k {
                    max = max.max(d[at(c)]);
                }
                let mut sum = T::zero();
                for c in 0..k {
                    let e = (d[at(c)] - max).exp();
                    probs[at(c)] = e;
                    sum += e;
                }
                for c in 0..k {
                    probs[at(c)] = probs[at(c)] / sum;
                }
                let label = labels[bi * p + pi];
                total += (sum.ln() + max - d[at(label)]).as_f64();
            }
        }
        let value = Tensor::scalar(T::cast_from(total / (b * p) as f64));
        let rg = self.any_grad(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(value, op, rg))
    }

    /// `Σ coefficient_i · term_i` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut acc = T::zero();
        for &(v, c) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::shape("weighted sum term", &[1], self.shape(v)));
            }
            acc += c * self.value(v).item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.any_grad(&vars);
        Ok(self.push(Tensor::scalar(acc), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// `Σ x ⊙ weights` for a constant weight tensor of the same shape.
    pub fn dot_const(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != weights.shape() {
            return Err(Error::shape("dot_const", weights.shape(), self.shape(x)));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.any_grad(&[x]);
        let op = Op::DotConst {
            x,
            weights: weights.data().to_vec(),
        };
        Ok(self.push(Tensor::scalar(s), op, rg))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(Error::shape("backward output", &[1], self.shape(output)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.and_then(|g| Tensor::new(n.value.shape(), g).ok()))
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn add_into(&self, grads: &mut [Option<Vec<T>>], v: Var, src: &[T]) {
        self.accumulate(grads, v, |g| {
            for (a, &b) in g.iter_mut().zip(src) {
                *a += b;
            }
        });
    }

    fn propagate(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                );
                if let Some(dx) = dx {
                    self.add_into(grads, *x, &dx);
                }
                if let Some(dw) = dw {
                    self.add_into(grads, *w, &dw);
                }
            }
            Op::ChannelBias { x, b } => {
                self.add_into(grads, *x, dy);
                let (outer, c, inner) = around(node.value.shape(), 1);
                self.accumulate(grads, *b, |g| {
                    for o in 0..outer {
                        for (ci, gc) in g.iter_mut().enumerate().take(c) {
                            let base = (o * c + ci) * inner;
                            for &v in &dy[base..base + inner] {
                                *gc += v;
                            }
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                train,
            } => {
                let (batch, c, spatial) = around(node.value.shape(), 1);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for b in 0..batch {
                    for ci in 0..c {
                        let base = (b * c + ci) * spatial;
                        for i in base..base + spatial {
                            sum_dy[ci] += dy[i];
                            sum_dy_xhat[ci] += dy[i] * xhat[i];
                        }
                    }
                }
                self.add_into(grads, *gamma, &sum_dy_xhat);
                self.add_into(grads, *beta, &sum_dy);
                let g = self.value(*gamma).data();
                let count = T::cast_from((batch * spatial) as f64);
                self.accumulate(grads, *x, |dx| {
                    for b in 0..batch {
                        for ci in 0..c {
                            let base = (b * c + ci) * spatial;
                            let s = g[ci] * invstd[ci];
                            for i in base..base + spatial {
                                dx[i] += if *train {
                                    s * (dy[i] - sum_dy[ci] / count - xhat[i] * sum_dy_xhat[ci] / count)
                                } else {
                                    s * dy[i]
                                };
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |g| {
                    for ((a, &d), &v) in g.iter_mut().zip(dy).zip(xv) {
                        if v > T::zero() {
                            *a += d;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.add_into(grads, *a, dy);
                self.add_into(grads, *b, dy);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |g| {
                    for ((x, &d), &o) in g.iter_mut().zip(dy).zip(bv) {
                        *x += d * o;
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for ((x, &d), &o) in g.iter_mut().zip(dy).zip(av) {
                        *x += d * o;
                    }
                });
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, |g| {
                    for (a, &d) in g.iter_mut().zip(dy) {
                        *a += d * *f;
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let total = node.value.shape()[*axis];
                let (outer, _, inner) = around(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    self.accumulate(grads, v, |g| {
                        for o in 0..outer {
                            let src = &dy[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            for (a, &d) in g[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *a += d;
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let len = node.value.shape()[*axis];
                let (outer, n, inner) = around(self.shape(*x), *axis);
                self.accumulate(grads, *x, |g| {
                    for o in 0..outer {
                        let dst = &mut g[(o * n + start) * inner..(o * n + start + len) * inner];
                        for (a, &d) in dst.iter_mut().zip(&dy[o * len * inner..(o + 1) * len * inner]) {
                            *a += d;
                        }
                    }
                });
            }
            Op::Reshape(x) => self.add_into(grads, *x, dy),
            Op::Mean { x, axis } => {
                let (outer, n, inner) = around(self.shape(*x), *axis);
                let inv = T::one() / T::cast_from(n as f64);
                self.accumulate(grads, *x, |g| {
                    for o in 0..outer {
                        for k in 0..n {
                            let dst = &mut g[(o * n + k) * inner..(o * n + k + 1) * inner];
                            for (a, &d) in dst.iter_mut().zip(&dy[o * inner..(o + 1) * inner]) {
                                *a += d * inv;
                            }
                        }
                    }
                });
            }
            Op::MatMul { a, b, trans_b } => self.matmul_backward(*a, *b, *trans_b, dy, grads),
            Op::MaskedSoftmax { x, mask } => {
                let cols = *node.value.shape().last().unwrap();
                let rows_in_mask = mask.len() / cols;
                let y = node.value.data();
                self.accumulate(grads, *x, |g| {
                    for (r, ((gr, yr), dr)) in g.chunks_mut(cols).zip(y.chunks(cols)).zip(dy.chunks(cols)).enumerate() {
                        let mrow = &mask[(r % rows_in_mask) * cols..(r % rows_in_mask + 1) * cols];
                        let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            if mrow[j] {
                                gr[j] += yr[j] * (dr[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::OuterSum { u, v } => {
                let s = node.value.shape();
                let (b, n, m) = (s[0], s[1], s[2]);
                self.accumulate(grads, *u, |g| {
                    for bi in 0..b {
                        for i in 0..n {
                            let row = &dy[(bi * n + i) * m..(bi * n + i + 1) * m];
                            g[bi * n + i] += row.iter().copied().sum();
                        }
                    }
                });
                self.accumulate(grads, *v, |g| {
                    for bi in 0..b {
                        for i in 0..n {
                            let row = &dy[(bi * n + i) * m..(bi * n + i + 1) * m];
                            for (a, &d) in g[bi * m..(bi + 1) * m].iter_mut().zip(row) {
                                *a += d;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (b, k, p) = around(self.shape(*logits), 1);
                let scale = dy[0] / T::cast_from((b * p) as f64);
                self.accumulate(grads, *logits, |g| {
                    for bi in 0..b {
                        for pi in 0..p {
                            let label = labels[bi * p + pi];
                            for c in 0..k {
                                let at = (bi * k + c) * p + pi;
                                let target = if c == label { T::one() } else { T::zero() };
                                g[at] += scale * (probs[at] - target);
                            }
                        }
                    }
                });
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    self.accumulate(grads, v, |g| g[0] += c * dy[0]);
                }
            }
            Op::DotConst { x, weights } => {
                self.accumulate(grads, *x, |g| {
                    for (a, &w) in g.iter_mut().zip(weights) {
                        *a += w * dy[0];
                    }
                });
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, trans_b: bool, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let as_ = self.shape(a);
        let bs = self.shape(b);
        let (m, k) = (as_[as_.len() - 2], as_[as_.len() - 1]);
        let (br, bc) = (bs[bs.len() - 2], bs[bs.len() - 1]);
        let n = if trans_b { br } else { bc };
        let batch: usize = as_[..as_.len() - 2].iter().product();
        let shared = bs.len() == 2;
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        // op(B)ᵀ as a view over B's storage
        let b_back = if trans_b {
            MatView::new(br, bc)
        } else {
            MatView::new(br, bc).t()
        };
        self.accumulate(grads, a, |g| {
            if shared {
                matmul_into(dy, MatView::new(batch * m, n), bd, b_back, g, T::one(), T::one());
            } else {
                for i in 0..batch {
                    matmul_into(
                        &dy[i * m * n..(i + 1) * m * n],
                        MatView::new(m, n),
                        &bd[i * br * bc..(i + 1) * br * bc],
                        b_back,
                        &mut g[i * m * k..(i + 1) * m * k],
                        T::one(),
                        T::one(),
                    );
                }
            }
        });
        self.accumulate(grads, b, |g| {
            let (rows, step) = if shared { (batch * m, 0) } else { (m, 1) };
            let count = if shared { 1 } else { batch };
            for i in 0..count {
                let a_i = &ad[i * step * m * k..][..rows * k];
                let dy_i = &dy[i * step * m * n..][..rows * n];
                let g_i = &mut g[i * step * br * bc..][..br * bc];
                if trans_b {
                    // dB (n×k) = dYᵀ · A
                    matmul_into(
                        dy_i,
                        MatView::new(rows, n).t(),
                        a_i,
                        MatView::new(rows, k),
                        g_i,
                        T::one(),
                        T::one(),
                    );
                } else {
                    // dB (k×n) = Aᵀ · dY
                    matmul_into(
                        a_i,
                        MatView::new(rows, k).t(),
                        dy_i,
                        MatView::new(rows, n),
                        g_i,
                        T::one(),
                        T::one(),
                    );
                }
            }
        });
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when the node does not influence the output or does not
    /// require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
