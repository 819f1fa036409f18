//! Masked self-supervised pretraining.
//!
//! Each stay masks `k_e` event rows and `k_t` bin columns. The encoder then
//! predicts, for every masked row and column, the value and presence of each
//! covered cell with four linear heads (value/presence × event/time axis).
//! Per cell the loss is `1[m > 0] (ŷ − x)² + α · BCE(logit, 1[m > 0])`; it is
//! averaged over the cells of each masked unit and then over all masked
//! units in the batch.

use std::io::Write;

use duett_tensor::nn::Linear;
use duett_tensor::rng::{stream, substream, Rng};
use duett_tensor::{AdamW, Graph, LrSchedule, OptState, ParamStore, Real, TensorError, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, Example};
use crate::model::{DuettModel, ModelConfig};
use crate::{Error, Result};

/// Masked event rows and bin columns of one stay, zero-based and sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub events: Vec<usize>,
    pub bins: Vec<usize>,
}

impl MaskSpec {
    pub fn is_empty(&self) -> bool {
        self.events.is_empty() && self.bins.is_empty()
    }

    pub fn validate(&self, n_e: usize, n_t: usize) -> Result<()> {
        if let Some(&i) = self.events.iter().find(|&&i| i >= n_e) {
            return Err(Error::InvalidArgument(format!("masked event {i} outside 0..{n_e}")));
        }
        if let Some(&j) = self.bins.iter().find(|&&j| j >= n_t) {
            return Err(Error::InvalidArgument(format!("masked bin {j} outside 0..{n_t}")));
        }
        Ok(())
    }

    /// Whether cell `(i, j)` of the event grid is covered.
    pub fn covers(&self, i: usize, j: usize) -> bool {
        self.events.contains(&i) || self.bins.contains(&j)
    }
}

/// Uniform draws without replacement on each axis.
pub fn sample_mask(n_e: usize, n_t: usize, k_e: usize, k_t: usize, rng: &mut Rng) -> Result<MaskSpec> {
    if k_e + k_t == 0 {
        return Err(Error::InvalidArgument("at least one event or bin must be masked".into()));
    }
    if k_e > n_e || k_t > n_t {
        return Err(Error::InvalidArgument(format!(
            "cannot mask {k_e} of {n_e} events and {k_t} of {n_t} bins"
        )));
    }
    let mut events = rand::seq::index::sample(rng, n_e, k_e).into_vec();
    let mut bins = rand::seq::index::sample(rng, n_t, k_t).into_vec();
    events.sort_unstable();
    bins.sort_unstable();
    Ok(MaskSpec { events, bins })
}

/// Replaces masked cells of `phi: [B, rows, n_t + 1, d]` with `token`. The
/// static row and the [REP] column are never touched.
pub fn apply_mask<T: Real>(g: &mut Graph<T>, phi: Var, cfg: &ModelConfig, specs: &[MaskSpec], token: Var) -> Result<Var> {
    let b = g.shape(phi)[0];
    if specs.len() != b {
        return Err(Error::InvalidArgument(format!("{} mask specs for a batch of {b}", specs.len())));
    }
    let (rows, cols) = (cfg.rows(), cfg.cols());
    let mut mask = Vec::with_capacity(b * rows * cols);
    for spec in specs {
        spec.validate(cfg.n_e, cfg.n_t)?;
        for i in 0..rows {
            for j in 0..cols {
                mask.push(i < cfg.n_e && j < cfg.n_t && spec.covers(i, j));
            }
        }
    }
    if !mask.iter().any(|&m| m) {
        return Ok(phi);
    }
    Ok(g.replace_rows(phi, token, mask)?)
}

/// Value and presence heads for both axes.
#[derive(Debug, Clone)]
pub struct SslHeads {
    pub event_value: Linear,
    pub event_presence: Linear,
    pub time_value: Linear,
    pub time_presence: Linear,
}

impl SslHeads {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let (ev, tm) = (cfg.cols() * cfg.d, cfg.rows() * cfg.d);
        Self {
            event_value: Linear::new(store, "ssl.event_value", ev, cfg.n_t, rng),
            event_presence: Linear::new(store, "ssl.event_presence", ev, cfg.n_t, rng),
            time_value: Linear::new(store, "ssl.time_value", tm, cfg.n_e, rng),
            time_presence: Linear::new(store, "ssl.time_presence", tm, cfg.n_e, rng),
        }
    }
}

/// Loss mixing: `total = value_weight · value + alpha · presence`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    /// 1 normally, 0 to train on presence alone.
    pub value_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            value_weight: 1.0,
        }
    }
}

/// One axis's share of the averaged loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct AxisLoss {
    pub value: f64,
    pub presence: f64,
    pub units: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SslLossReport {
    pub total: f64,
    pub value: f64,
    pub presence: f64,
    pub event_axis: AxisLoss,
    pub time_axis: AxisLoss,
}

impl SslLossReport {
    pub fn units(&self) -> usize {
        self.event_axis.units + self.time_axis.units
    }
}

/// Per-cell loss on plain numbers; `presence_logit` is the
/// pre-sigmoid presence score.
pub fn cell_loss(pred_value: f64, presence_logit: f64, x: f64, m: u32, alpha: f64) -> (f64, f64) {
    let present = m > 0;
    let value = if present { (pred_value - x).powi(2) } else { 0.0 };
    let y = if present { 1.0 } else { 0.0 };
    let z = presence_logit;
    let bce = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    (value, alpha * bce)
}

struct AxisTerms {
    value: Var,
    presence: Var,
}

/// Builds the value and presence terms for one axis. `inputs` are the
/// flattened unit representations `[U, width]`; `cells[u]` lists the
/// `(event, bin)` grid cells unit `u` predicts, in head-output order.
#[allow(clippy::too_many_arguments)]
fn axis_terms<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    value_head: &Linear,
    presence_head: &Linear,
    inputs: Var,
    cells: &[(usize, Vec<(usize, usize)>)],
    batch: &Batch,
    total_units: usize,
) -> Result<AxisTerms> {
    let values = value_head.forward(g, store, inputs)?;
    let logits = presence_head.forward(g, store, inputs)?;
    let n_out = g.shape(values)[1];
    let mut targets = Vec::with_capacity(cells.len() * n_out);
    let mut presence = Vec::with_capacity(cells.len() * n_out);
    let mut w_value = Vec::with_capacity(cells.len() * n_out);
    let mut w_presence = Vec::with_capacity(cells.len() * n_out);
    for (b, unit) in cells {
        let w = 1.0 / (unit.len() as f64 * total_units as f64);
        for &(i, j) in unit {
            let k = (b * batch.n_e + i) * batch.n_t + j;
            let observed = batch.m[k] > 0;
            targets.push(T::lit(batch.x[k]));
            presence.push(T::lit(if observed { 1.0 } else { 0.0 }));
            w_value.push(T::lit(if observed { w } else { 0.0 }));
            w_presence.push(T::lit(w));
        }
    }
    let target = g.input(duett_tensor::Tensor::new(g.shape(values).to_vec(), targets)?);
    let diff = g.sub(values, target)?;
    let sq = g.mul(diff, diff)?;
    let value = g.weighted_sum(sq, w_value)?;
    let bce = g.bce_with_logits(logits, presence)?;
    let presence = g.weighted_sum(bce, w_presence)?;
    Ok(AxisTerms { value, presence })
}

/// Self-supervised loss for encoder output `z` computed on masked input.
pub fn ssl_loss<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    heads: &SslHeads,
    cfg: &ModelConfig,
    z: Var,
    batch: &Batch,
    specs: &[MaskSpec],
    weights: LossWeights,
) -> Result<(Var, SslLossReport)> {
    if specs.len() != batch.size {
        return Err(Error::InvalidArgument(format!("{} mask specs for a batch of {}", specs.len(), batch.size)));
    }
    let (rows, cols, d) = (cfg.rows(), cfg.cols(), cfg.d);
    let mut ev_index = Vec::new();
    let mut ev_cells = Vec::new();
    let mut tm_index = Vec::new();
    let mut tm_cells = Vec::new();
    for (b, spec) in specs.iter().enumerate() {
        spec.validate(cfg.n_e, cfg.n_t)?;
        for &i in &spec.events {
            ev_index.push(b * rows + i);
            ev_cells.push((b, (0..cfg.n_t).map(|j| (i, j)).collect::<Vec<_>>()));
        }
        for &j in &spec.bins {
            tm_index.extend((0..rows).map(|i| (b * rows + i) * cols + j));
            tm_cells.push((b, (0..cfg.n_e).map(|i| (i, j)).collect::<Vec<_>>()));
        }
    }
    let units = ev_cells.len() + tm_cells.len();
    if units == 0 {
        return Err(Error::InvalidArgument("mask is empty".into()));
    }
    let mut value_terms = Vec::new();
    let mut presence_terms = Vec::new();
    let mut report = SslLossReport::default();
    if !ev_cells.is_empty() {
        let n = ev_cells.len();
        let inputs = g.gather_rows(z, cols * d, ev_index, vec![n, cols * d])?;
        let t = axis_terms(g, store, &heads.event_value, &heads.event_presence, inputs, &ev_cells, batch, units)?;
        report.event_axis = AxisLoss {
            value: g.value(t.value).item().as_f64(),
            presence: g.value(t.presence).item().as_f64(),
            units: n,
        };
        value_terms.push(t.value);
        presence_terms.push(t.presence);
    }
    if !tm_cells.is_empty() {
        let n = tm_cells.len();
        let inputs = g.gather_rows(z, d, tm_index, vec![n, rows * d])?;
        let t = axis_terms(g, store, &heads.time_value, &heads.time_presence, inputs, &tm_cells, batch, units)?;
        report.time_axis = AxisLoss {
            value: g.value(t.value).item().as_f64(),
            presence: g.value(t.presence).item().as_f64(),
            units: n,
        };
        value_terms.push(t.value);
        presence_terms.push(t.presence);
    }
    let mut value = value_terms[0];
    for &v in &value_terms[1..] {
        value = g.add(value, v)?;
    }
    let mut presence = presence_terms[0];
    for &p in &presence_terms[1..] {
        presence = g.add(presence, p)?;
    }
    let scaled_value = g.scale(value, T::lit(weights.value_weight));
    let scaled_presence = g.scale(presence, T::lit(weights.alpha));
    let total = g.add(scaled_value, scaled_presence)?;
    report.value = g.value(value).item().as_f64();
    report.presence = g.value(presence).item().as_f64();
    report.total = g.value(total).item().as_f64();
    Ok((total, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub k_e: usize,
    pub k_t: usize,
    pub loss: LossWeights,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.0,
            k_e: 1,
            k_t: 1,
            loss: LossWeights::default(),
            seed: 2020,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_value: f64,
    pub val_presence: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainOutcome {
    /// One-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub epochs: Vec<PretrainEpoch>,
}

/// One-based index of the lowest loss; ties keep the earliest epoch.
pub fn best_epoch(losses: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, &l) in losses.iter().enumerate() {
        if best.is_none_or(|(_, b)| l < b) {
            best = Some((k, l));
        }
    }
    best.map(|(k, _)| k + 1)
}

pub fn write_pretrain_csv<W: Write>(mut out: W, epochs: &[PretrainEpoch]) -> Result<()> {
    writeln!(out, "epoch,train_loss,val_loss,val_value,val_presence,lr")?;
    for e in epochs {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            e.epoch, e.train_loss, e.val_loss, e.val_value, e.val_presence, e.lr
        )?;
    }
    Ok(())
}

pub(crate) fn divergence(context: &str, err: TensorError) -> Error {
    match err {
        TensorError::NonFinite(op) => Error::Divergence(format!("{context}: non-finite value in {op}")),
        other => Error::Tensor(other),
    }
}

pub(crate) fn batch_ranges(n: usize, size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let size = size.max(1);
    (0..n.div_ceil(size)).map(move |k| k * size..((k + 1) * size).min(n))
}

/// Validation loss with masks fixed by `seed`, averaged over masked units.
pub fn validation_loss<T: Real>(
    model: &DuettModel<T>,
    examples: &[Example],
    k_e: usize,
    k_t: usize,
    weights: LossWeights,
    seed: u64,
    batch_size: usize,
) -> Result<SslLossReport> {
    let cfg = &model.config;
    let specs = (0..examples.len())
        .map(|k| sample_mask(cfg.n_e, cfg.n_t, k_e, k_t, &mut substream(seed, "val-mask", k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut dummy = stream(seed, "unused");
    let (mut sum, mut units) = (SslLossReport::default(), 0usize);
    for r in batch_ranges(examples.len(), batch_size) {
        let batch = Batch::from_slice(&examples[r.clone()])?;
        let mut g = Graph::new();
        let out = model.encoder.forward(&mut g, &model.store, &batch, Some(&specs[r.clone()]), false, &mut dummy)?;
        let (_, rep) = ssl_loss(&mut g, &model.store, &model.ssl, cfg, out.z, &batch, &specs[r], weights)?;
        let u = rep.units() as f64;
        sum.total += rep.total * u;
        sum.value += rep.value * u;
        sum.presence += rep.presence * u;
        units += rep.units();
    }
    let n = units.max(1) as f64;
    Ok(SslLossReport {
        total: sum.total / n,
        value: sum.value / n,
        presence: sum.presence / n,
        ..Default::default()
    })
}

/// Trains encoder and self-supervised heads, keeping the weights of the
/// epoch with the lowest validation loss. The [REP] token is frozen: its
/// output is not read by any self-supervised head target.
pub fn pretrain<T: Real>(
    model: &mut DuettModel<T>,
    train: &[Example],
    val: &[Example],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("pretraining needs non-empty train and validation splits".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    let mc = model.config.clone();
    // validate the mask sizes before any work
    sample_mask(mc.n_e, mc.n_t, cfg.k_e, cfg.k_t, &mut stream(cfg.seed, "probe"))?;
    let schedule = LrSchedule::new(cfg.peak_lr, cfg.warmup_steps.max(1));
    let hyper = AdamW {
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let mut opt = OptState::new(hyper, model.store.len());
    let mut shuffle_rng = stream(cfg.seed, "shuffle");
    let mut mask_rng = stream(cfg.seed, "mask");
    let mut dropout_rng = stream(cfg.seed, "dropout");
    let frozen = [model.encoder.embed.rep];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut n_batches, mut lr) = (0.0, 0usize, 0.0);
        for r in batch_ranges(order.len(), cfg.batch_size) {
            let items: Vec<&Example> = order[r].iter().map(|&k| &train[k]).collect();
            let batch = Batch::new(&items)?;
            let specs = (0..batch.size)
                .map(|_| sample_mask(mc.n_e, mc.n_t, cfg.k_e, cfg.k_t, &mut mask_rng))
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            g.freeze(frozen);
            let out = model.encoder.forward(&mut g, &model.store, &batch, Some(&specs), true, &mut dropout_rng)?;
            let (loss, rep) = ssl_loss(&mut g, &model.store, &model.ssl, &mc, out.z, &batch, &specs, cfg.loss)?;
            if !rep.total.is_finite() {
                return Err(Error::Divergence(format!("epoch {epoch}: training loss is {}", rep.total)));
            }
            let grads = g.param_grads(loss).map_err(|e| divergence(&format!("epoch {epoch}"), e))?;
            lr = schedule.lr_at(opt.step() + 1);
            opt.update(&mut model.store, &grads, lr)?;
            model.apply_bn_updates(&out.bn_updates);
            loss_sum += rep.total;
            n_batches += 1;
        }
        let v = validation_loss(model, val, cfg.k_e, cfg.k_t, cfg.loss, cfg.seed, cfg.batch_size.max(64))?;
        if !v.total.is_finite() {
            return Err(Error::Divergence(format!("epoch {epoch}: validation loss is {}", v.total)));
        }
        log::info!("pretrain epoch {epoch}: train {:.5} val {:.5}", loss_sum / n_batches as f64, v.total);
        epochs.push(PretrainEpoch {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            val_loss: v.total,
            val_value: v.value,
            val_presence: v.presence,
            lr,
        });
        if best.as_ref().is_none_or(|(b, _, _)| v.total < *b) {
            best = Some((v.total, epoch, model.store.clone()));
        }
    }
    let (_, best_epoch, store) = best.expect("at least one epoch ran");
    model.store = store;
    Ok(PretrainOutcome { best_epoch, epochs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use duett_tensor::Tensor;

    #[test]
    fn default_mask_has_one_row_and_one_column() {
        let mut rng = stream(1, "m");
        let s = sample_mask(12, 16, 1, 1, &mut rng).unwrap();
        assert_eq!((s.events.len(), s.bins.len()), (1, 1));
        let all = sample_mask(5, 4, 5, 0, &mut rng).unwrap();
        assert_eq!(all.events, vec![0, 1, 2, 3, 4]);
        assert!(sample_mask(5, 4, 0, 0, &mut rng).is_err());
        assert!(sample_mask(5, 4, 6, 0, &mut rng).is_err());
    }

    #[test]
    fn mask_draws_are_uniform() {
        let mut rng = stream(2, "uniform");
        let n_e = 8;
        let draws = 100_000;
        let mut counts = vec![0usize; n_e];
        for _ in 0..draws {
            counts[sample_mask(n_e, 4, 1, 0, &mut rng).unwrap().events[0]] += 1;
        }
        let p = 1.0 / n_e as f64;
        let expected = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() < 3.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn cell_loss_hand_cases() {
        let (v, p) = cell_loss(0.7, 0.0, 0.0, 0, 1.0);
        assert_eq!(v, 0.0);
        assert!((p - std::f64::consts::LN_2).abs() < 1e-12);
        let (v, p) = cell_loss(1.0, 50.0, 1.5, 2, 1.0);
        assert!((v - 0.25).abs() < 1e-12);
        assert!(p < 1e-20);
        let (v, p) = cell_loss(1.5, 60.0, 1.5, 2, 1.0);
        assert!(v + p < 1e-20);
    }

    #[test]
    fn best_epoch_is_argmin() {
        assert_eq!(best_epoch(&[1.0, 0.8, 0.9]), Some(2));
        assert_eq!(best_epoch(&[0.5, 0.5]), Some(1));
        assert_eq!(best_epoch(&[]), None);
    }

    #[test]
    fn apply_mask_touches_only_masked_cells() {
        let mut cfg = ModelConfig::new(2, 3, 1);
        cfg.d = 1;
        let mut g = Graph::<f64>::new();
        let phi = g.input(Tensor::new(vec![1, 3, 4, 1], (0..12).map(|v| v as f64).collect()).unwrap());
        let tok = g.input(Tensor::new(vec![1], vec![-1.0]).unwrap());
        let empty = apply_mask(&mut g, phi, &cfg, &[MaskSpec::default()], tok).unwrap();
        assert_eq!(empty, phi);
        let spec = MaskSpec { events: vec![1], bins: vec![0] };
        let out = apply_mask(&mut g, phi, &cfg, &[spec], tok).unwrap();
        #[rustfmt::skip]
        let expected = vec![
            -1.0, 1.0, 2.0, 3.0,
            -1.0, -1.0, -1.0, 7.0,
            8.0, 9.0, 10.0, 11.0,
        ];
        assert_eq!(g.value(out).data(), expected.as_slice());
        let bad = MaskSpec { events: vec![2], bins: vec![] };
        assert!(apply_mask(&mut g, phi, &cfg, &[bad], tok).is_err());
    }

    #[test]
    fn csv_log_header() {
        let mut buf = Vec::new();
        let e = PretrainEpoch { epoch: 1, train_loss: 1.0, val_loss: 0.5, val_value: 0.25, val_presence: 0.25, lr: 1e-3 };
        write_pretrain_csv(&mut buf, &[e]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,train_loss,val_loss,val_value,val_presence,lr\n1,1,0.5,0.25,0.25,0.001\n");
    }

    #[test]
    fn batch_ranges_cover_everything() {
        let r: Vec<_> = batch_ranges(7, 3).collect();
        assert_eq!(r, vec![0..3, 3..6, 6..7]);
        assert_eq!(batch_ranges(0, 3).count(), 0);
    }
}
