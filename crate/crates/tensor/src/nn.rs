//! Parameterized building blocks: linear maps, ScaleNorm gains and
//! multi-head self-attention.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Graph, ParamId, ParamKind, ParamStore, Real, Result, Tensor, TensorError, Var};

pub const SCALE_NORM_EPS: f64 = 1e-5;

/// Uniform in `±sqrt(1/fan_in)`.
pub fn uniform_init<T: Real, R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("sized by construction")
}

/// Normal with standard deviation `std`.
pub fn normal_init<T: Real, R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("sized by construction")
}

/// `y = x W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(vec![fan_in, fan_out], fan_in, rng),
            ParamKind::Trainable { decay: true },
        );
        let bias = store.add(
            format!("{name}.bias"),
            uniform_init(vec![fan_out], fan_in, rng),
            ParamKind::Trainable { decay: false },
        );
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bcast(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Learned scalar gain for `scale_norm`, initialized to `sqrt(dim)`.
#[derive(Debug, Clone)]
pub struct ScaleNorm {
    pub gain: ParamId,
}

impl ScaleNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gain = store.add(
            format!("{name}.gain"),
            Tensor::full(vec![1], T::lit((dim as f64).sqrt())),
            ParamKind::Trainable { decay: false },
        );
        Self { gain }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        g.scale_norm(x, gain, T::lit(SCALE_NORM_EPS))
    }
}

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Batch normalization over `[B, n]` with affine scale/shift and running
/// averages kept as buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
}

/// Pending running-statistics update from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    /// Unbiased batch variance.
    pub var: Vec<f64>,
}

impl BatchNormUpdate {
    pub fn apply<T: Real>(&self, store: &mut ParamStore<T>) {
        let m = BATCH_NORM_MOMENTUM;
        for (r, &b) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&self.mean) {
            *r = T::lit((1.0 - m) * r.as_f64() + m * b);
        }
        for (r, &b) in store.get_mut(self.running_var).data_mut().iter_mut().zip(&self.var) {
            *r = T::lit((1.0 - m) * r.as_f64() + m * b);
        }
    }
}

impl BatchNorm1d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(vec![dim], T::one()), ParamKind::Trainable { decay: false });
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![dim]), ParamKind::Trainable { decay: false });
        let running_mean = store.add(format!("{name}.running_mean"), Tensor::zeros(vec![dim]), ParamKind::Buffer);
        let running_var = store.add(format!("{name}.running_var"), Tensor::full(vec![dim], T::one()), ParamKind::Buffer);
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            dim,
        }
    }

    /// Uses batch statistics when training with at least two rows, running
    /// averages otherwise. Returns the running-average update to apply after
    /// the step, if any.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        training: bool,
    ) -> Result<(Var, Option<BatchNormUpdate>)> {
        let rows = g.shape(x).first().copied().unwrap_or(0);
        let (normed, update) = if training && rows >= 2 {
            let (y, stats) = g.batch_norm(x, BATCH_NORM_EPS)?;
            let unbias = rows as f64 / (rows - 1) as f64;
            let update = BatchNormUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                mean: stats.mean,
                var: stats.var.iter().map(|v| v * unbias).collect(),
            };
            (y, Some(update))
        } else {
            let shift: Vec<T> = store.get(self.running_mean).data().iter().map(|&m| -m).collect();
            let scale: Vec<T> = store
                .get(self.running_var)
                .data()
                .iter()
                .map(|&v| T::one() / (v + T::lit(BATCH_NORM_EPS)).sqrt())
                .collect();
            let shift = g.input(Tensor::new(vec![self.dim], shift)?);
            let scale = g.input(Tensor::new(vec![self.dim], scale)?);
            let centered = g.add_bcast(x, shift)?;
            (g.mul_bcast(centered, scale)?, None)
        };
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul_bcast(normed, gamma)?;
        Ok((g.add_bcast(y, beta)?, update))
    }
}

/// Unmasked scaled dot-product self-attention with `n_heads` heads.
/// Internal width equals the token width.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub dim: usize,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_heads == 0 || !dim.is_multiple_of(n_heads) {
            return Err(TensorError::InvalidArgument(format!(
                "token dim {dim} not divisible by {n_heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng),
            dim,
            n_heads,
        })
    }

    /// `x: [B, S, D] → [B, S, D]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(TensorError::ShapeMismatch {
                op: "multi_head_attention",
                left: shape,
                right: vec![self.dim],
            });
        }
        let (b, s, d, h) = (shape[0], shape[1], shape[2], self.n_heads);
        let dh = d / h;
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        // [B, S, H, dh] → [B, H, S, dh]
        let split: Vec<usize> = (0..b)
            .flat_map(|bi| (0..h).flat_map(move |hi| (0..s).map(move |si| bi * s * h + si * h + hi)))
            .collect();
        let q = g.gather_rows(q, dh, split.clone(), vec![b * h, s, dh])?;
        let k = g.gather_rows(k, dh, split.clone(), vec![b * h, s, dh])?;
        let v = g.gather_rows(v, dh, split, vec![b * h, s, dh])?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, T::lit(1.0 / (dh as f64).sqrt()));
        let probs = g.softmax(scores)?;
        let ctx = g.bmm(probs, v, false)?;
        // [B, H, S, dh] → [B, S, H, dh]
        let merge: Vec<usize> = (0..b)
            .flat_map(|bi| (0..s).flat_map(move |si| (0..h).map(move |hi| bi * h * s + hi * s + si)))
            .collect();
        let ctx = g.gather_rows(ctx, dh, merge, vec![b, s, d])?;
        self.output.forward(g, store, ctx)
    }
}
