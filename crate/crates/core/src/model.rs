//! The dual-axis encoder.
//!
//! Activations are kept event-major as `[B, rows, cols, d]` with
//! `cols = n_t + 1`. An event sublayer treats each row, flattened to
//! `cols · d`, as one token; a time sublayer treats each column, flattened to
//! `rows · d`, as one token. Both are pre-norm Transformer sublayers with
//! ScaleNorm, and the axis embedding is added to the residual stream just
//! before each sublayer.

use std::fmt;
use std::str::FromStr;

use duett_tensor::nn::{normal_init, BatchNormUpdate, Linear, MultiHeadAttention, ScaleNorm};
use duett_tensor::rng::{stream, Rng};
use duett_tensor::{Graph, ParamId, ParamKind, ParamStore, Real, Var};
use serde::{Deserialize, Serialize};

use crate::dataset::Batch;
use crate::embedding::{Cve, InputEmbedding, EMBED_STD};
use crate::finetune::ClsHead;
use crate::ssl::{apply_mask, MaskSpec, SslHeads};
use crate::{Error, Result};

/// Sublayer arrangement per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Event sublayer then time sublayer.
    Dual,
    /// Two event sublayers.
    EventOnly,
    /// Two time sublayers.
    TimeOnly,
}

impl Layout {
    pub fn axes(self) -> [Axis; 2] {
        match self {
            Layout::Dual => [Axis::Event, Axis::Time],
            Layout::EventOnly => [Axis::Event, Axis::Event],
            Layout::TimeOnly => [Axis::Time, Axis::Time],
        }
    }
}

impl FromStr for Layout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(Layout::Dual),
            "event_only" => Ok(Layout::EventOnly),
            "time_only" => Ok(Layout::TimeOnly),
            _ => Err(Error::Config(format!("unknown layout {s:?}"))),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Dual => "dual",
            Layout::EventOnly => "event_only",
            Layout::TimeOnly => "time_only",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Event,
    Time,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_e: usize,
    pub n_t: usize,
    pub n_static: usize,
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub layout: Layout,
    /// One set of axis embeddings for all layers, or one per layer.
    pub shared_embeddings: bool,
    /// Inject axis embeddings before every layer, or before the first only.
    pub inject_every_layer: bool,
    pub final_norm: bool,
    /// Static features as an extra event row; otherwise joined at the head.
    pub static_row: bool,
}

impl ModelConfig {
    pub fn new(n_e: usize, n_t: usize, n_static: usize) -> Self {
        Self {
            n_e,
            n_t,
            n_static,
            d: 16,
            n_layers: 2,
            n_heads: 4,
            ffn_hidden: 512,
            dropout: 0.1,
            layout: Layout::Dual,
            shared_embeddings: true,
            inject_every_layer: true,
            final_norm: true,
            static_row: true,
        }
    }

    pub fn rows(&self) -> usize {
        self.n_e + self.static_row as usize
    }

    pub fn cols(&self) -> usize {
        self.n_t + 1
    }

    pub fn token_dim(&self, axis: Axis) -> usize {
        match axis {
            Axis::Event => self.cols() * self.d,
            Axis::Time => self.rows() * self.d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_e == 0 || self.n_t == 0 || self.d == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("n_e, n_t, d and ffn_hidden must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.n_layers > 0 {
            for axis in self.layout.axes() {
                let dim = self.token_dim(axis);
                if self.n_heads == 0 || !dim.is_multiple_of(self.n_heads) {
                    return Err(Error::Config(format!(
                        "{axis:?} token width {dim} is not divisible by n_heads = {}",
                        self.n_heads
                    )));
                }
            }
        }
        Ok(())
    }

    fn uses(&self, axis: Axis) -> bool {
        self.n_layers > 0 && self.layout.axes().contains(&axis)
    }

    fn embedding_sets(&self) -> usize {
        if self.shared_embeddings || !self.inject_every_layer {
            1
        } else {
            self.n_layers
        }
    }
}

/// `x + Attn(SN(x))`, then `+ FFN(SN(·))`, with dropout on both branches.
#[derive(Debug, Clone)]
pub struct Sublayer {
    pub axis: Axis,
    pub norm_attn: ScaleNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: ScaleNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl Sublayer {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, axis: Axis, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let dim = cfg.token_dim(axis);
        Ok(Self {
            axis,
            norm_attn: ScaleNorm::new(store, &format!("{name}.norm_attn"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, cfg.n_heads, rng)?,
            norm_ffn: ScaleNorm::new(store, &format!("{name}.norm_ffn"), dim),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), dim, cfg.ffn_hidden, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), cfg.ffn_hidden, dim, rng),
        })
    }

    /// `x: [B, S, D]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        dropout: f64,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let a = self.norm_attn.forward(g, store, x)?;
        let a = self.attn.forward(g, store, a)?;
        let a = g.dropout(a, dropout, training, rng)?;
        let h = g.add(x, a)?;
        let f = self.norm_ffn.forward(g, store, h)?;
        let f = self.ffn_in.forward(g, store, f)?;
        let f = g.relu(f);
        let f = self.ffn_out.forward(g, store, f)?;
        let f = g.dropout(f, dropout, training, rng)?;
        Ok(g.add(h, f)?)
    }
}

/// Per-sublayer instrumentation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SublayerTrace {
    pub layer: usize,
    pub axis: Axis,
    /// Sequence length seen by attention.
    pub tokens: usize,
    pub token_dim: usize,
    /// Attention matrix dimensions per batch item and head.
    pub attention: (usize, usize),
    pub flops: u64,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: ModelConfig,
    pub embed: InputEmbedding,
    /// `[rows, cols · d]` per embedding set.
    pub event_embeds: Vec<ParamId>,
    pub time_embeds: Vec<Cve>,
    /// `n_layers × 2` sublayers in execution order.
    pub sublayers: Vec<Sublayer>,
    pub final_norm: Option<ScaleNorm>,
}

pub struct EncoderOutput {
    /// `[B, rows, cols, d]`.
    pub z: Var,
    /// Embedded input before masking.
    pub phi: Var,
    pub static_emb: Var,
    pub trace: Vec<SublayerTrace>,
    pub bn_updates: Vec<BatchNormUpdate>,
}

impl Encoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let embed = InputEmbedding::new(store, cfg.n_e, cfg.n_t, cfg.n_static, cfg.d, cfg.static_row, rng);
        let sets = cfg.embedding_sets();
        let suffix = |k: usize| if sets == 1 { String::new() } else { format!(".{k}") };
        let mut event_embeds = Vec::new();
        let mut time_embeds = Vec::new();
        for k in 0..sets {
            if cfg.uses(Axis::Event) {
                event_embeds.push(store.add(
                    format!("axis.event{}", suffix(k)),
                    normal_init(vec![cfg.rows(), cfg.token_dim(Axis::Event)], EMBED_STD, rng),
                    ParamKind::Trainable { decay: false },
                ));
            }
            if cfg.uses(Axis::Time) {
                time_embeds.push(Cve::new(store, &format!("axis.time{}", suffix(k)), cfg.token_dim(Axis::Time), rng));
            }
        }
        let mut sublayers = Vec::new();
        for l in 0..cfg.n_layers {
            for (k, axis) in cfg.layout.axes().into_iter().enumerate() {
                let name = format!("layers.{l}.{k}.{}", if axis == Axis::Event { "event" } else { "time" });
                sublayers.push(Sublayer::new(store, &name, axis, cfg, rng)?);
            }
        }
        let final_norm = cfg.final_norm.then(|| ScaleNorm::new(store, "final_norm", cfg.d));
        Ok(Self {
            config: cfg.clone(),
            embed,
            event_embeds,
            time_embeds,
            sublayers,
            final_norm,
        })
    }

    /// Runs the encoder. `masks`, when given, holds one mask per batch item.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &Batch,
        masks: Option<&[MaskSpec]>,
        training: bool,
        rng: &mut Rng,
    ) -> Result<EncoderOutput> {
        let cfg = &self.config;
        if batch.n_static != cfg.n_static {
            return Err(Error::Data(format!(
                "batch has {} static features, model expects {}",
                batch.n_static, cfg.n_static
            )));
        }
        let emb = self.embed.assemble(g, store, batch, training)?;
        let (b, rows, cols, d) = (batch.size, cfg.rows(), cfg.cols(), cfg.d);
        let mut x = match masks {
            Some(specs) => {
                let token = g.param(store, self.embed.mask);
                apply_mask(g, emb.phi, cfg, specs, token)?
            }
            None => emb.phi,
        };

        // column tokens come from the same time values for every layer
        let mut time_pos: Vec<Option<Var>> = vec![None; self.time_embeds.len()];
        let mut trace = Vec::with_capacity(self.sublayers.len());
        let ev_dim = cfg.token_dim(Axis::Event);
        let tm_dim = cfg.token_dim(Axis::Time);
        let to_time = transpose_index(b, rows, cols);
        let to_event = transpose_index(b, cols, rows);
        for (s, sub) in self.sublayers.iter().enumerate() {
            let layer = s / 2;
            let inject = cfg.inject_every_layer || layer == 0;
            let set = if cfg.embedding_sets() == 1 { 0 } else { layer };
            let before = g.flops();
            let (tokens, token_dim) = match sub.axis {
                Axis::Event => {
                    let mut h = g.reshape(x, vec![b, rows, ev_dim])?;
                    if inject {
                        let pe = g.param(store, self.event_embeds[set]);
                        h = g.add_bcast(h, pe)?;
                    }
                    let h = sub.forward(g, store, h, cfg.dropout, training, rng)?;
                    x = g.reshape(h, vec![b, rows, cols, d])?;
                    (rows, ev_dim)
                }
                Axis::Time => {
                    let mut h = g.gather_rows(x, d, to_time.clone(), vec![b, cols, tm_dim])?;
                    if inject {
                        let pt = match time_pos[set] {
                            Some(v) => v,
                            None => {
                                let v = self.time_embeds[set].forward(g, store, &batch.times)?;
                                let v = g.reshape(v, vec![b, cols, tm_dim])?;
                                time_pos[set] = Some(v);
                                v
                            }
                        };
                        h = g.add(h, pt)?;
                    }
                    let h = sub.forward(g, store, h, cfg.dropout, training, rng)?;
                    x = g.gather_rows(h, d, to_event.clone(), vec![b, rows, cols, d])?;
                    (cols, tm_dim)
                }
            };
            trace.push(SublayerTrace {
                layer,
                axis: sub.axis,
                tokens,
                token_dim,
                attention: (tokens, tokens),
                flops: g.flops() - before,
            });
        }
        if let Some(norm) = &self.final_norm {
            x = norm.forward(g, store, x)?;
        }
        Ok(EncoderOutput {
            z: x,
            phi: emb.phi,
            static_emb: emb.static_emb,
            trace,
            bn_updates: emb.bn_updates,
        })
    }
}

/// Row permutation taking `[B, p, q, d]` to `[B, q, p, d]` in units of `d`.
fn transpose_index(b: usize, p: usize, q: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(b * p * q);
    for bi in 0..b {
        for j in 0..q {
            for i in 0..p {
                index.push(bi * p * q + i * q + j);
            }
        }
    }
    index
}

/// Classification head settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub tasks: Vec<String>,
    /// Single linear layer instead of the hidden-layer MLP.
    pub linear: bool,
}

/// Encoder, self-supervised heads and an optional classifier sharing one
/// parameter store.
#[derive(Debug, Clone)]
pub struct DuettModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub ssl: SslHeads,
    pub cls: Option<(HeadSpec, ClsHead)>,
}

impl<T: Real> DuettModel<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = stream(seed, "init");
        let encoder = Encoder::new(&mut store, config, &mut rng)?;
        let ssl = SslHeads::new(&mut store, config, &mut stream(seed, "init-ssl"));
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            ssl,
            cls: None,
        })
    }

    /// Adds a classification head, drawn from its own stream so the encoder
    /// initialization does not depend on it.
    pub fn with_head(mut self, spec: HeadSpec, seed: u64) -> Result<Self> {
        if self.cls.is_some() {
            return Err(Error::InvalidArgument("model already has a classification head".into()));
        }
        if spec.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        let head = ClsHead::new(&mut self.store, &self.config, spec.tasks.len(), spec.linear, &mut stream(seed, "init-cls"));
        self.cls = Some((spec, head));
        Ok(self)
    }

    pub fn apply_bn_updates(&mut self, updates: &[BatchNormUpdate]) {
        for u in updates {
            u.apply(&mut self.store);
        }
    }

    pub fn num_params(&self) -> usize {
        self.store.entries().iter().map(|e| e.value.numel()).sum()
    }

    /// Parameters whose names start with `prefix`.
    pub fn param_ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.store.ids().filter(move |&id| self.store.entry(id).name.starts_with(prefix))
    }
}
