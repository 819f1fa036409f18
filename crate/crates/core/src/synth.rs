//! Synthetic event-stream generator with planted cross-event and
//! cross-time structure.
//!
//! Each stay draws `latent_dim` stationary AR(1) trajectories on the bin grid.
//! Ordinary event types are noisy linear read-outs of the latents; link
//! targets are instead weighted sums of lagged source values. Every
//! (type, bin) cell is observed with probability `sparsity[type]`, optionally
//! tilted by the first latent, and then holds one or more events at uniform
//! times inside the bin. The label is a logistic function of the first latent
//! averaged over the late part of the window.

use std::collections::BTreeMap;

use duett_tensor::rng::{stream, substream, Rng};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::binning::bin_edge;
use crate::data::{EventTriplet, PatientStay, Vocabulary};
use crate::{Error, Result};

pub const LABEL_NAME: &str = "outcome";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedLink {
    pub source: usize,
    pub target: usize,
    /// In bins; `target(j)` reads `source(j - lag)`.
    pub lag: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRule {
    pub weight: f64,
    pub bias: f64,
    /// Trailing share of the window whose latent mean drives the label.
    pub late_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_e: usize,
    pub n_static: usize,
    pub n_stays: usize,
    pub n_t: usize,
    pub window_days: f64,
    pub sparsity: Vec<f64>,
    pub links: Vec<PlantedLink>,
    /// Standard deviation of per-bin value noise.
    pub noise_std: f64,
    pub latent_dim: usize,
    pub ar_coef: f64,
    /// Poisson mean of extra events in an observed cell.
    pub extra_events: f64,
    /// Standard deviation of per-event jitter around the cell value.
    pub jitter_std: f64,
    /// Log-odds shift of observation probability per unit of latent 0.
    pub presence_coupling: f64,
    pub label: LabelRule,
    /// Seeds loadings and offsets, shared by all datasets of one config.
    pub structure_seed: u64,
}

impl SynthConfig {
    /// Fully observed, noise-free defaults for `n_e` types and `n_t` bins.
    pub fn basic(n_e: usize, n_t: usize, n_stays: usize) -> Self {
        Self {
            n_e,
            n_static: 2,
            n_stays,
            n_t,
            window_days: 2.0,
            sparsity: vec![1.0; n_e],
            links: Vec::new(),
            noise_std: 0.0,
            latent_dim: 2,
            ar_coef: 0.8,
            extra_events: 0.0,
            jitter_std: 0.0,
            presence_coupling: 0.0,
            label: LabelRule {
                weight: 1.5,
                bias: 0.0,
                late_fraction: 0.25,
            },
            structure_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_e == 0 || self.n_t == 0 || self.latent_dim == 0 {
            return bad("n_e, n_t and latent_dim must be positive".into());
        }
        if !(self.window_days.is_finite() && self.window_days > 0.0) {
            return bad(format!("window_days {} must be positive", self.window_days));
        }
        if self.sparsity.len() != self.n_e || self.sparsity.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return bad("sparsity needs one probability in (0, 1] per event type".into());
        }
        if !(self.ar_coef.abs() < 1.0) {
            return bad(format!("ar_coef {} must lie in (-1, 1)", self.ar_coef));
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("jitter_std", self.jitter_std),
            ("extra_events", self.extra_events),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !self.presence_coupling.is_finite() || !self.label.weight.is_finite() || !self.label.bias.is_finite() {
            return bad("coupling and label coefficients must be finite".into());
        }
        if !(self.label.late_fraction > 0.0 && self.label.late_fraction <= 1.0) {
            return bad("label.late_fraction must be in (0, 1]".into());
        }
        for l in &self.links {
            if l.source >= self.n_e || l.target >= self.n_e {
                return bad(format!("link {l:?} references an event outside 0..{}", self.n_e));
            }
            if l.lag >= self.n_t {
                return bad(format!("link lag {} must be below n_t = {}", l.lag, self.n_t));
            }
            if !l.weight.is_finite() {
                return bad(format!("link weight {} is not finite", l.weight));
            }
        }
        self.link_order().map(|_| ())
    }

    /// Event types in an order where every link source precedes its target.
    fn link_order(&self) -> Result<Vec<usize>> {
        let is_target = |i: usize| self.links.iter().any(|l| l.target == i);
        let mut done = vec![false; self.n_e];
        let mut order: Vec<usize> = (0..self.n_e).filter(|&i| !is_target(i)).collect();
        for &i in &order {
            done[i] = true;
        }
        while order.len() < self.n_e {
            let next = (0..self.n_e)
                .find(|&i| !done[i] && self.links.iter().filter(|l| l.target == i).all(|l| done[l.source]));
            match next {
                Some(i) => {
                    done[i] = true;
                    order.push(i);
                }
                None => return Err(Error::Config("planted links form a cycle".into())),
            }
        }
        Ok(order)
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from((0..self.n_e).map(|i| format!("e{i:02}")).collect::<Vec<_>>())
    }
}

struct Structure {
    loadings: Vec<Vec<f64>>,
    offsets: Vec<f64>,
    static_loadings: Vec<Vec<f64>>,
}

fn structure(cfg: &SynthConfig) -> Structure {
    let mut rng = stream(cfg.structure_seed, "synth-structure");
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let scale = 1.0 / (cfg.latent_dim as f64).sqrt();
    let draw = |n: usize, s: f64, rng: &mut Rng| (0..n).map(|_| s * unit.sample(rng)).collect::<Vec<_>>();
    let loadings = (0..cfg.n_e).map(|_| draw(cfg.latent_dim, scale, &mut rng)).collect();
    let offsets = draw(cfg.n_e, 0.5, &mut rng);
    let static_loadings = (0..cfg.n_static).map(|_| draw(cfg.latent_dim, scale, &mut rng)).collect();
    Structure {
        loadings,
        offsets,
        static_loadings,
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Generates `cfg.n_stays` stays, deterministic in `(cfg, seed)`.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Vec<PatientStay>> {
    cfg.validate()?;
    let st = structure(cfg);
    let order = cfg.link_order()?;
    Ok((0..cfg.n_stays)
        .map(|k| generate_stay(cfg, &st, &order, &mut substream(seed, "synth-stay", k as u64), k))
        .collect())
}

fn generate_stay(cfg: &SynthConfig, st: &Structure, order: &[usize], rng: &mut Rng, index: usize) -> PatientStay {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let n_t = cfg.n_t;
    // burn-in so lagged reads stay on the grid
    let burn: usize = cfg.links.iter().map(|l| l.lag).sum();
    let len = n_t + burn;
    let innov = (1.0 - cfg.ar_coef * cfg.ar_coef).sqrt();
    let latents: Vec<Vec<f64>> = (0..cfg.latent_dim)
        .map(|_| {
            let mut z = Vec::with_capacity(len);
            let mut cur = unit.sample(rng);
            for _ in 0..len {
                z.push(cur);
                cur = cfg.ar_coef * cur + innov * unit.sample(rng);
            }
            z
        })
        .collect();

    let mut values = vec![vec![0.0; len]; cfg.n_e];
    for &i in order {
        let incoming: Vec<&PlantedLink> = cfg.links.iter().filter(|l| l.target == i).collect();
        for j in 0..len {
            let signal = if incoming.is_empty() {
                st.offsets[i] + (0..cfg.latent_dim).map(|k| st.loadings[i][k] * latents[k][j]).sum::<f64>()
            } else {
                incoming
                    .iter()
                    .filter(|l| j >= l.lag)
                    .map(|l| l.weight * values[l.source][j - l.lag])
                    .sum()
            };
            values[i][j] = signal + cfg.noise_std * unit.sample(rng);
        }
    }

    // statics read the latents at stay start
    let statics = st
        .static_loadings
        .iter()
        .map(|row| {
            let s: f64 = row.iter().zip(&latents).map(|(w, z)| w * z[burn]).sum();
            s + 0.5 * unit.sample(rng)
        })
        .collect();

    let w = cfg.window_days;
    let mut events = Vec::new();
    for i in 0..cfg.n_e {
        for j in 0..n_t {
            let g = burn + j;
            let mut p = cfg.sparsity[i];
            if cfg.presence_coupling != 0.0 && p < 1.0 {
                p = sigmoid((p / (1.0 - p)).ln() + cfg.presence_coupling * latents[0][g]);
            }
            if !rng.random_bool(p) {
                continue;
            }
            let extra = if cfg.extra_events > 0.0 {
                Poisson::new(cfg.extra_events).expect("positive rate").sample(rng) as usize
            } else {
                0
            };
            let (lo, hi) = (bin_edge(j, n_t, w), bin_edge(j + 1, n_t, w));
            for _ in 0..=extra {
                let mut t = lo + rng.random::<f64>() * (hi - lo);
                if !(t >= lo && t < hi) {
                    t = lo;
                }
                events.push(EventTriplet {
                    event: i,
                    time_days: t,
                    value: values[i][g] + cfg.jitter_std * unit.sample(rng),
                });
            }
        }
    }

    let late_start = ((n_t as f64) * (1.0 - cfg.label.late_fraction)).floor() as usize;
    let late = &latents[0][burn + late_start.min(n_t - 1)..];
    let late_mean = late.iter().sum::<f64>() / late.len() as f64;
    let y = rng.random_bool(sigmoid(cfg.label.weight * late_mean + cfg.label.bias));
    let mut labels = BTreeMap::new();
    labels.insert(LABEL_NAME.to_string(), if y { 1.0 } else { 0.0 });
    PatientStay::new(format!("stay-{index:06}"), statics, events, labels)
}
