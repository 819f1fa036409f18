//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys and repeated keys
//! are errors. [`RunConfig::to_text`] writes every key in a fixed order, so
//! the resolved text doubles as the canonical form for hashing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use duett_tensor::Precision;

use crate::binning::{Aggregation, Window};
use crate::checkpoint::sha256_hex;
use crate::finetune::FinetuneConfig;
use crate::model::{Layout, ModelConfig};
use crate::ssl::{LossWeights, PretrainConfig};
use crate::{Error, Result};

/// Mechanism switches for ablation runs. At most one of each exclusive pair
/// may be set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablations {
    pub event_only: bool,
    pub time_only: bool,
    pub value_loss_only: bool,
    pub presence_loss_only: bool,
    pub mask_bins_only: bool,
    pub mask_events_only: bool,
    pub no_ssl: bool,
    pub first_layer_embed_only: bool,
    pub late_static_fusion: bool,
}

pub const VARIANTS: [&str; 9] = [
    "event_only",
    "time_only",
    "value_loss_only",
    "presence_loss_only",
    "mask_bins_only",
    "mask_events_only",
    "no_ssl",
    "first_layer_embed_only",
    "late_static_fusion",
];

impl Ablations {
    fn flag_mut(&mut self, name: &str) -> Option<&mut bool> {
        Some(match name {
            "event_only" => &mut self.event_only,
            "time_only" => &mut self.time_only,
            "value_loss_only" => &mut self.value_loss_only,
            "presence_loss_only" => &mut self.presence_loss_only,
            "mask_bins_only" => &mut self.mask_bins_only,
            "mask_events_only" => &mut self.mask_events_only,
            "no_ssl" => &mut self.no_ssl,
            "first_layer_embed_only" => &mut self.first_layer_embed_only,
            "late_static_fusion" => &mut self.late_static_fusion,
            _ => return None,
        })
    }

    fn flag(&self, name: &str) -> bool {
        let mut copy = *self;
        copy.flag_mut(name).map(|f| *f).unwrap_or(false)
    }

    /// Turns on the named variant; `full` leaves everything off.
    pub fn enable(&mut self, variant: &str) -> Result<()> {
        if variant == "full" {
            return Ok(());
        }
        match self.flag_mut(variant) {
            Some(f) => {
                *f = true;
                Ok(())
            }
            None => Err(Error::Config(format!("unknown ablation variant {variant:?}"))),
        }
    }

    fn validate(&self) -> Result<()> {
        for (a, b) in [
            ("event_only", "time_only"),
            ("value_loss_only", "presence_loss_only"),
            ("mask_bins_only", "mask_events_only"),
        ] {
            if self.flag(a) && self.flag(b) {
                return Err(Error::Config(format!("{a} and {b} cannot both be set")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub n_t: usize,
    pub window_days: Window,
    pub aggregation: Aggregation,
    pub normalize_static: bool,
    /// Label names; empty means every label of the first training stay.
    pub tasks: Vec<String>,
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub shared_embeddings: bool,
    pub final_norm: bool,
    pub alpha: f64,
    pub k_e: usize,
    pub k_t: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub finetune_epochs: usize,
    pub finetune_peak_lr: f64,
    pub finetune_warmup_steps: u64,
    pub top_k: usize,
    pub ablations: Ablations,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 2020,
            precision: Precision::Single,
            n_t: 32,
            window_days: Window::Fixed(2.0),
            aggregation: Aggregation::Last,
            normalize_static: true,
            tasks: Vec::new(),
            d: 16,
            n_layers: 2,
            n_heads: 4,
            ffn_hidden: 512,
            dropout: 0.1,
            shared_embeddings: true,
            final_norm: true,
            alpha: 1.0,
            k_e: 1,
            k_t: 1,
            epochs: 300,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.0,
            finetune_epochs: 30,
            finetune_peak_lr: 1e-3,
            finetune_warmup_steps: 100,
            top_k: 5,
            ablations: Ablations::default(),
        }
    }
}

fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: {key} is set twice", n + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "precision" => self.precision = value.parse().map_err(|_| Error::Config(format!("invalid precision {value:?}")))?,
            "n_t" => self.n_t = parse_value(key, value)?,
            "window_days" => self.window_days = value.parse()?,
            "aggregation" => self.aggregation = value.parse()?,
            "normalize_static" => self.normalize_static = parse_bool(key, value)?,
            "tasks" => {
                self.tasks = value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
            }
            "d" => self.d = parse_value(key, value)?,
            "L" => self.n_layers = parse_value(key, value)?,
            "n_heads" => self.n_heads = parse_value(key, value)?,
            "ffn_hidden" => self.ffn_hidden = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "shared_embeddings" => self.shared_embeddings = parse_bool(key, value)?,
            "final_norm" => self.final_norm = parse_bool(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "k_e" => self.k_e = parse_value(key, value)?,
            "k_t" => self.k_t = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "peak_lr" => self.peak_lr = parse_value(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "finetune_epochs" => self.finetune_epochs = parse_value(key, value)?,
            "finetune_peak_lr" => self.finetune_peak_lr = parse_value(key, value)?,
            "finetune_warmup_steps" => self.finetune_warmup_steps = parse_value(key, value)?,
            "top_k" => self.top_k = parse_value(key, value)?,
            _ => match self.ablations.flag_mut(key) {
                Some(flag) => *flag = parse_bool(key, value)?,
                None => return Err(Error::Config(format!("unknown key {key:?}"))),
            },
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_t == 0 || self.d == 0 || self.n_heads == 0 || self.ffn_hidden == 0 {
            return fail("n_t, d, n_heads and ffn_hidden must be positive");
        }
        if self.epochs == 0 || self.finetune_epochs == 0 || self.batch_size == 0 || self.top_k == 0 {
            return fail("epochs, finetune_epochs, batch_size and top_k must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        if !(self.peak_lr > 0.0 && self.finetune_peak_lr > 0.0) || self.warmup_steps == 0 || self.finetune_warmup_steps == 0 {
            return fail("learning rates and warmup steps must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("alpha and weight_decay must be finite and non-negative");
        }
        self.ablations.validate()?;
        let (k_e, k_t) = self.mask_sizes();
        if k_e + k_t == 0 {
            return fail("masking removes nothing: k_e and k_t are both zero after ablations");
        }
        Ok(())
    }

    /// `(k_e, k_t)` after the masking ablations.
    pub fn mask_sizes(&self) -> (usize, usize) {
        let a = &self.ablations;
        (
            if a.mask_bins_only { 0 } else { self.k_e },
            if a.mask_events_only { 0 } else { self.k_t },
        )
    }

    pub fn model_config(&self, n_e: usize, n_static: usize) -> ModelConfig {
        let a = &self.ablations;
        ModelConfig {
            n_e,
            n_t: self.n_t,
            n_static,
            d: self.d,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_hidden: self.ffn_hidden,
            dropout: self.dropout,
            layout: if a.event_only {
                Layout::EventOnly
            } else if a.time_only {
                Layout::TimeOnly
            } else {
                Layout::Dual
            },
            shared_embeddings: self.shared_embeddings,
            inject_every_layer: !a.first_layer_embed_only,
            final_norm: self.final_norm,
            static_row: !a.late_static_fusion,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let a = &self.ablations;
        let (k_e, k_t) = self.mask_sizes();
        PretrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            weight_decay: self.weight_decay,
            k_e,
            k_t,
            loss: LossWeights {
                alpha: if a.value_loss_only { 0.0 } else { self.alpha },
                value_weight: if a.presence_loss_only { 0.0 } else { 1.0 },
            },
            seed: self.seed,
        }
    }

    pub fn finetune_config(&self, freeze_encoder: bool) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.finetune_epochs,
            batch_size: self.batch_size,
            peak_lr: self.finetune_peak_lr,
            warmup_steps: self.finetune_warmup_steps,
            weight_decay: self.weight_decay,
            seed: self.seed,
            freeze_encoder,
            top_k: self.top_k,
        }
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut v: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("precision".into(), self.precision.to_string()),
            ("n_t".into(), self.n_t.to_string()),
            ("window_days".into(), self.window_days.to_string()),
            ("aggregation".into(), self.aggregation.to_string()),
            ("normalize_static".into(), self.normalize_static.to_string()),
            ("tasks".into(), self.tasks.join(",")),
            ("d".into(), self.d.to_string()),
            ("L".into(), self.n_layers.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("ffn_hidden".into(), self.ffn_hidden.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            ("shared_embeddings".into(), self.shared_embeddings.to_string()),
            ("final_norm".into(), self.final_norm.to_string()),
            ("alpha".into(), self.alpha.to_string()),
            ("k_e".into(), self.k_e.to_string()),
            ("k_t".into(), self.k_t.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("peak_lr".into(), self.peak_lr.to_string()),
            ("warmup_steps".into(), self.warmup_steps.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("finetune_epochs".into(), self.finetune_epochs.to_string()),
            ("finetune_peak_lr".into(), self.finetune_peak_lr.to_string()),
            ("finetune_warmup_steps".into(), self.finetune_warmup_steps.to_string()),
            ("top_k".into(), self.top_k.to_string()),
        ];
        for name in VARIANTS {
            v.push((name.into(), self.ablations.flag(name).to_string()));
        }
        v
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn settings(&self) -> BTreeMap<String, String> {
        self.entries().into_iter().collect()
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}
