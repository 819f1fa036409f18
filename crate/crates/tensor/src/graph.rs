//! Tape of primitive operations and its reverse pass.
//!
//! Every method on [`Graph`] computes its value eagerly and appends one node.
//! Nodes only reference earlier nodes, so the tape is acyclic by construction
//! and the backward pass is a single reverse sweep.

use std::collections::{HashMap, HashSet};

use rand::Rng;

use crate::{ParamId, ParamStore, Real, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Input,
    Leaf,
    Param,
    Add(Var, Var),
    AddBcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    ScaleNorm { x: Var, gain: Var, eps: T, norms: Vec<T> },
    GatherRows { x: Var, row: usize, index: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    ConcatLast(Var, Var),
    ReplaceRows { x: Var, token: Var, mask: Vec<bool> },
    Dropout { x: Var, keep: Vec<T> },
    BatchNorm { x: Var, inv_std: Vec<T> },
    BceWithLogits { logits: Var, targets: Vec<T> },
    Sum(Var),
    WeightedSum { x: Var, weights: Vec<T> },
    NonDiff { x: Var, name: &'static str },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-feature batch statistics produced by [`Graph::batch_norm`], used by
/// callers to maintain running averages.
#[derive(Debug, Clone)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A recording of one forward computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    frozen: HashSet<ParamId>,
    non_finite: Option<&'static str>,
    flops: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            frozen: HashSet::new(),
            non_finite: None,
            flops: 0,
        }
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

    /// Multiply-accumulate count of all matrix products recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// First op that produced a NaN or infinity, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some(op) => Err(TensorError::NonFinite(op)),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Var {
        let needs_grad = match &op {
            Op::Input => false,
            Op::Leaf | Op::Param => true,
            other => parents(other).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(name);
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, "input")
    }

    /// Differentiable leaf that is not a stored parameter.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, "leaf")
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    /// Frozen parameters enter as constants and receive no gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = if self.frozen.contains(&id) {
            self.push(store.get(id).clone(), Op::Input, "param")
        } else {
            self.push(store.get(id).clone(), Op::Param, "param")
        };
        self.params.insert(id, v);
        v
    }

    /// Marks parameters as constants for every later [`Graph::param`] call.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        // A reshape is a gather with the identity index, which keeps the
        // backward rule uniform.
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(TensorError::DataLength {
                shape,
                expected: n,
                actual: self.value(x).numel(),
            });
        }
        let t = self.value(x).clone().reshape(shape)?;
        let index = (0..n).collect();
        Ok(self.push(t, Op::GatherRows { x, row: 1, index }, "reshape"))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, name: &'static str) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self.val(a).iter().zip(self.val(b)).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, op, name))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    fn bcast_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, name: &'static str) -> Result<Var> {
        if !suffix_broadcast(self.shape(a), self.shape(b)) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let bv = self.val(b);
        let n = bv.len().max(1);
        let data = self
            .val(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, op, name))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bcast_map(a, b, |x, y| x + y, Op::AddBcast(a, b), "add_bcast")
    }

    /// `a * b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bcast_map(a, b, |x, y| x * y, Op::MulBcast(a, b), "mul_bcast")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.val(a).iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same size");
        self.push(t, Op::Scale(a, c), "scale")
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>, name: &'static str) -> Var {
        let data = self.val(x).iter().map(|&v| f(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same size");
        self.push(t, op, name)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x), "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x), "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x), "sigmoid")
    }

    /// Applies an arbitrary element-wise function that has no derivative.
    /// A gradient that must flow through it is an error.
    pub fn non_diff(&mut self, x: Var, name: &'static str, f: impl Fn(T) -> T) -> Var {
        self.unary(x, f, Op::NonDiff { x, name }, name)
    }

    /// `[.., k] × [k, n] → [.., n]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (sa, sw) = (self.shape(a).to_vec(), self.shape(w).to_vec());
        if sa.is_empty() || sw.len() != 2 || sa[sa.len() - 1] != sw[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", left: sa, right: sw });
        }
        let (k, n) = (sw[0], sw[1]);
        let m: usize = sa[..sa.len() - 1].iter().product();
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.val(a), false, self.val(w), false, &mut out, false);
        self.flops += (m * k * n) as u64;
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMul(a, w), "matmul"))
    }

    /// Batched product `[B, m, k] × [B, k, n]`, or `× [B, n, k]ᵀ` with `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || TensorError::ShapeMismatch { op: "bmm", left: sa.clone(), right: sb.clone() };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.val(a), self.val(b));
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        self.flops += (batch * m * k * n) as u64;
        let t = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(t, Op::BatchMatMul { a, b, trans_b }, "bmm"))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or(TensorError::InvalidArgument("softmax of a scalar".into()))?;
        let mut out = self.val(x).to_vec();
        if n > 0 {
            for row in out.chunks_mut(n) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Softmax(x), "softmax"))
    }

    /// `gain · x / max(‖x‖₂, eps)` over the last axis; `gain` is a one-element tensor.
    pub fn scale_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        if self.value(gain).numel() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "scale_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gain).to_vec(),
            });
        }
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or(TensorError::InvalidArgument("scale_norm of a scalar".into()))?;
        let g = self.val(gain)[0];
        let mut out = self.val(x).to_vec();
        let mut norms = Vec::with_capacity(out.len() / n.max(1));
        if n > 0 {
            for row in out.chunks_mut(n) {
                let r = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                let denom = r.max(eps);
                norms.push(r);
                for v in row.iter_mut() {
                    *v = g * *v / denom;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::ScaleNorm { x, gain, eps, norms }, "scale_norm"))
    }

    /// Views `x` as rows of length `row` and returns the rows listed in
    /// `index` (repeats allowed), reshaped to `shape`.
    pub fn gather_rows(&mut self, x: Var, row: usize, index: Vec<usize>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let src = self.val(x);
        if row == 0 || !src.len().is_multiple_of(row) {
            return Err(TensorError::InvalidArgument(format!(
                "gather_rows: {} values do not split into rows of {row}",
                src.len()
            )));
        }
        let n_rows = src.len() / row;
        if let Some(&bad) = index.iter().find(|&&i| i >= n_rows) {
            return Err(TensorError::InvalidArgument(format!("gather_rows: row {bad} out of {n_rows}")));
        }
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in &index {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::GatherRows { x, row, index }, "gather_rows"))
    }

    /// Stacks tensors viewed as rows of length `row`: result `[Σ rows, row]`.
    pub fn concat_rows(&mut self, parts: &[Var], row: usize) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            let v = self.val(p);
            if row == 0 || !v.len().is_multiple_of(row) {
                return Err(TensorError::InvalidArgument(format!(
                    "concat_rows: {} values do not split into rows of {row}",
                    v.len()
                )));
            }
            out.extend_from_slice(v);
        }
        let n = out.len() / row.max(1);
        let t = Tensor::new(vec![n, row], out)?;
        Ok(self.push(t, Op::ConcatRows { parts: parts.to_vec() }, "concat_rows"))
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(TensorError::ShapeMismatch { op: "concat_last", left: sa, right: sb });
        }
        let (p, q) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let mut out = Vec::with_capacity(rows * (p + q));
        let (av, bv) = (self.val(a), self.val(b));
        for r in 0..rows {
            out.extend_from_slice(&av[r * p..(r + 1) * p]);
            out.extend_from_slice(&bv[r * q..(r + 1) * q]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = p + q;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::ConcatLast(a, b), "concat_last"))
    }

    /// Rows of `x` (length = `token.numel()`) flagged in `mask` are replaced
    /// by `token`. Replaced rows pass no gradient back to `x`.
    pub fn replace_rows(&mut self, x: Var, token: Var, mask: Vec<bool>) -> Result<Var> {
        let row = self.value(token).numel();
        let src = self.val(x);
        if row == 0 || src.len() != mask.len() * row {
            return Err(TensorError::InvalidArgument(format!(
                "replace_rows: {} values, {} mask rows of {row}",
                src.len(),
                mask.len()
            )));
        }
        let tok = self.val(token);
        let mut out = src.to_vec();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out[r * row..(r + 1) * row].copy_from_slice(tok);
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(t, Op::ReplaceRows { x, token, mask }, "replace_rows"))
    }

    /// Inverted dropout. Identity when not training or `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument(format!("dropout probability {p} not in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let scale = T::lit(1.0 / (1.0 - p));
        let keep: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { scale })
            .collect();
        let data = self.val(x).iter().zip(&keep).map(|(&v, &k)| v * k).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { x, keep }, "dropout"))
    }

    /// Normalizes each column of `x: [B, n]` with the batch mean and biased
    /// variance. No affine part; callers add their own scale and shift.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, BatchNormStats)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(TensorError::InvalidArgument(format!("batch_norm needs [B, n], got {shape:?}")));
        }
        let (b, n) = (shape[0], shape[1]);
        let xv = self.val(x);
        let mut mean = vec![0.0f64; n];
        let mut var = vec![0.0f64; n];
        for r in 0..b {
            for c in 0..n {
                mean[c] += xv[r * n + c].as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        for r in 0..b {
            for c in 0..n {
                let d = xv[r * n + c].as_f64() - mean[c];
                var[c] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= b as f64);
        let inv_std: Vec<T> = var.iter().map(|&v| T::lit(1.0 / (v + eps).sqrt())).collect();
        let mut out = Vec::with_capacity(b * n);
        for r in 0..b {
            for c in 0..n {
                out.push((xv[r * n + c] - T::lit(mean[c])) * inv_std[c]);
            }
        }
        let t = Tensor::new(shape, out)?;
        let v = self.push(t, Op::BatchNorm { x, inv_std }, "batch_norm");
        Ok((v, BatchNormStats { mean, var }))
    }

    /// Element-wise binary cross-entropy from logits, in the stable form
    /// `max(z, 0) − z·y + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<T>) -> Result<Var> {
        if targets.len() != self.value(logits).numel() {
            return Err(TensorError::DataLength {
                shape: self.shape(logits).to_vec(),
                expected: self.value(logits).numel(),
                actual: targets.len(),
            });
        }
        let data = self.val(logits).iter().zip(&targets).map(|(&z, &y)| bce_logit(z, y)).collect();
        let t = Tensor::new(self.shape(logits).to_vec(), data)?;
        Ok(self.push(t, Op::BceWithLogits { logits, targets }, "bce_with_logits"))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, T::lit(1.0 / n as f64))
    }

    /// `Σ wᵢ xᵢ` with constant weights, as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(TensorError::DataLength {
                shape: self.shape(x).to_vec(),
                expected: self.value(x).numel(),
                actual: weights.len(),
            });
        }
        let s = self.val(x).iter().zip(&weights).map(|(&a, &w)| a * w).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, "weighted_sum"))
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    /// Nodes that do not influence the loss get zero tensors.
    pub fn grad(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor<T>>> {
        let adj = self.backward(loss)?;
        Ok(wrt
            .iter()
            .map(|v| adj[v.0].clone().unwrap_or_else(|| Tensor::zeros(self.shape(*v).to_vec())))
            .collect())
    }

    /// Gradients for every parameter bound to this graph, in id order.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<(ParamId, Tensor<T>)>> {
        let mut adj = self.backward(loss)?;
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter(|(id, _)| !self.frozen.contains(id))
            .map(|(&id, v)| (id, adj[v.0].take().unwrap_or_else(|| Tensor::zeros(self.shape(*v).to_vec()))))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
        let ls = self.shape(loss);
        if !ls.is_empty() {
            return Err(TensorError::NotScalar(ls.to_vec()));
        }
        self.check_finite()?;
        let mut adj: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = adj[i].take() else { continue };
            self.backward_node(node, &gy, &mut adj)?;
            adj[i] = Some(gy);
        }
        let out = adj
            .into_iter()
            .zip(&self.nodes)
            .map(|(a, n)| a.map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("adjoint size")))
            .collect();
        Ok(out)
    }

    fn backward_node(&self, node: &Node<T>, gy: &[T], adj: &mut [Option<Vec<T>>]) -> Result<()> {
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Input | Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(*a, &mut |g| {
                    for ((g, &d), &y) in g.iter_mut().zip(gy).zip(bv) {
                        *g += d * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((g, &d), &x) in g.iter_mut().zip(gy).zip(av) {
                        *g += d * x;
                    }
                });
            }
            Op::AddBcast(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                let n = self.value(*b).numel().max(1);
                acc(*b, &mut |g| {
                    for chunk in gy.chunks(n) {
                        add_into(g, chunk);
                    }
                });
            }
            Op::MulBcast(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let n = bv.len().max(1);
                acc(*a, &mut |g| {
                    for (gc, dc) in g.chunks_mut(n).zip(gy.chunks(n)) {
                        for ((g, &d), &y) in gc.iter_mut().zip(dc).zip(bv) {
                            *g += d * y;
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for (dc, xc) in gy.chunks(n).zip(av.chunks(n)) {
                        for ((g, &d), &x) in g.iter_mut().zip(dc).zip(xc) {
                            *g += d * x;
                        }
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * *c)),
            Op::MatMul(a, w) => {
                let sw = self.shape(*w);
                let (k, n) = (sw[0], sw[1]);
                let m = if n == 0 { 0 } else { gy.len() / n };
                let (av, wv) = (self.val(*a), self.val(*w));
                // dA = dY · Wᵀ ; dW = Aᵀ · dY
                acc(*a, &mut |g| T::gemm(m, n, k, gy, false, wv, true, g, true));
                acc(*w, &mut |g| T::gemm(k, m, n, av, true, gy, false, g, true));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { self.shape(*b)[1] } else { self.shape(*b)[2] };
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(*a, &mut |g| {
                    for i in 0..batch {
                        let gyi = &gy[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        // dA = dY · Bᵀ where B is k×n (or stored n×k when trans_b)
                        T::gemm(m, n, k, gyi, false, bi, !*trans_b, &mut g[i * m * k..(i + 1) * m * k], true);
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..batch {
                        let gyi = &gy[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let gi = &mut g[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B stored n×k: dB = dYᵀ · A
                            T::gemm(n, m, k, gyi, true, ai, false, gi, true);
                        } else {
                            T::gemm(k, m, n, ai, true, gyi, false, gi, true);
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.val(*x);
                acc(*x, &mut |g| {
                    for ((g, &d), &v) in g.iter_mut().zip(gy).zip(xv) {
                        if v > T::zero() {
                            *g += d;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = node.value.data();
                acc(*x, &mut |g| {
                    for ((g, &d), &y) in g.iter_mut().zip(gy).zip(yv) {
                        *g += d * (T::one() - y * y);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                acc(*x, &mut |g| {
                    for ((g, &d), &y) in g.iter_mut().zip(gy).zip(yv) {
                        *g += d * y * (T::one() - y);
                    }
                });
            }
            Op::Softmax(x) => {
                let yv = node.value.data();
                let n = *node.value.shape().last().unwrap();
                acc(*x, &mut |g| {
                    if n == 0 {
                        return;
                    }
                    for ((gr, dr), yr) in g.chunks_mut(n).zip(gy.chunks(n)).zip(yv.chunks(n)) {
                        let dot: T = dr.iter().zip(yr).map(|(&d, &y)| d * y).sum();
                        for ((g, &d), &y) in gr.iter_mut().zip(dr).zip(yr) {
                            *g += y * (d - dot);
                        }
                    }
                });
            }
            Op::ScaleNorm { x, gain, eps, norms } => {
                let xv = self.val(*x);
                let n = *node.value.shape().last().unwrap();
                let gval = self.val(*gain)[0];
                acc(*x, &mut |g| {
                    if n == 0 {
                        return;
                    }
                    for (((gr, dr), xr), &r) in g.chunks_mut(n).zip(gy.chunks(n)).zip(xv.chunks(n)).zip(norms) {
                        if r > *eps {
                            let dot: T = dr.iter().zip(xr).map(|(&d, &v)| d * v).sum();
                            let c = dot / (r * r);
                            for ((g, &d), &v) in gr.iter_mut().zip(dr).zip(xr) {
                                *g += gval / r * (d - v * c);
                            }
                        } else {
                            for (g, &d) in gr.iter_mut().zip(dr) {
                                *g += gval / *eps * d;
                            }
                        }
                    }
                });
                acc(*gain, &mut |g| {
                    let mut s = T::zero();
                    if n > 0 {
                        for ((dr, xr), &r) in gy.chunks(n).zip(xv.chunks(n)).zip(norms) {
                            let denom = r.max(*eps);
                            s += dr.iter().zip(xr).map(|(&d, &v)| d * v).sum::<T>() / denom;
                        }
                    }
                    g[0] += s;
                });
            }
            Op::GatherRows { x, row, index } => {
                let row = *row;
                acc(*x, &mut |g| {
                    for (k, &i) in index.iter().enumerate() {
                        add_into(&mut g[i * row..(i + 1) * row], &gy[k * row..(k + 1) * row]);
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, &mut |g| add_into(g, &gy[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatLast(a, b) => {
                let p = *self.shape(*a).last().unwrap();
                let q = *self.shape(*b).last().unwrap();
                let w = p + q;
                acc(*a, &mut |g| {
                    for (r, gr) in g.chunks_mut(p.max(1)).enumerate() {
                        if p > 0 {
                            add_into(gr, &gy[r * w..r * w + p]);
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for (r, gr) in g.chunks_mut(q.max(1)).enumerate() {
                        if q > 0 {
                            add_into(gr, &gy[r * w + p..(r + 1) * w]);
                        }
                    }
                });
            }
            Op::ReplaceRows { x, token, mask } => {
                let row = self.value(*token).numel();
                acc(*x, &mut |g| {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            add_into(&mut g[r * row..(r + 1) * row], &gy[r * row..(r + 1) * row]);
                        }
                    }
                });
                acc(*token, &mut |g| {
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            add_into(g, &gy[r * row..(r + 1) * row]);
                        }
                    }
                });
            }
            Op::Dropout { x, keep } => acc(*x, &mut |g| {
                for ((g, &d), &k) in g.iter_mut().zip(gy).zip(keep) {
                    *g += d * k;
                }
            }),
            Op::BatchNorm { x, inv_std } => {
                let yv = node.value.data();
                let n = inv_std.len();
                let b = yv.len() / n.max(1);
                acc(*x, &mut |g| {
                    let bt = T::lit(b as f64);
                    for c in 0..n {
                        let mut sum_d = T::zero();
                        let mut sum_dy = T::zero();
                        for r in 0..b {
                            sum_d += gy[r * n + c];
                            sum_dy += gy[r * n + c] * yv[r * n + c];
                        }
                        for r in 0..b {
                            let i = r * n + c;
                            g[i] += inv_std[c] / bt * (bt * gy[i] - sum_d - yv[i] * sum_dy);
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let zv = self.val(*logits);
                acc(*logits, &mut |g| {
                    for (((g, &d), &z), &y) in g.iter_mut().zip(gy).zip(zv).zip(targets) {
                        *g += d * (sigmoid(z) - y);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += gy[0])),
            Op::WeightedSum { x, weights } => acc(*x, &mut |g| {
                for (g, &w) in g.iter_mut().zip(weights) {
                    *g += gy[0] * w;
                }
            }),
            Op::NonDiff { x, name } => {
                if wants(*x) && gy.iter().any(|v| *v != T::zero()) {
                    return Err(TensorError::NonDifferentiable(name));
                }
            }
        }
        Ok(())
    }
}

fn parents<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Input | Op::Leaf | Op::Param => vec![],
        Op::Add(a, b) | Op::AddBcast(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MulBcast(a, b) => {
            vec![*a, *b]
        }
        Op::MatMul(a, b) | Op::ConcatLast(a, b) => vec![*a, *b],
        Op::BatchMatMul { a, b, .. } => vec![*a, *b],
        Op::Scale(x, _) | Op::Relu(x) | Op::Tanh(x) | Op::Sigmoid(x) | Op::Softmax(x) | Op::Sum(x) => vec![*x],
        Op::ScaleNorm { x, gain, .. } => vec![*x, *gain],
        Op::GatherRows { x, .. } | Op::Dropout { x, .. } | Op::BatchNorm { x, .. } => vec![*x],
        Op::ConcatRows { parts } => parts.clone(),
        Op::ReplaceRows { x, token, .. } => vec![*x, *token],
        Op::BceWithLogits { logits, .. } => vec![*logits],
        Op::WeightedSum { x, .. } | Op::NonDiff { x, .. } => vec![*x],
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn bce_logit<T: Real>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}
