//! Supervised fine-tuning from the [REP] column, linear probing, evaluation
//! reports and masked reconstruction.

use std::io::Write;

use duett_tensor::nn::{BatchNorm1d, BatchNormUpdate, Linear};
use duett_tensor::rng::{stream, Rng};
use duett_tensor::{AdamW, Graph, LrSchedule, OptState, ParamId, ParamStore, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, Example};
use crate::metrics::{pr_auc, pr_curve, roc_auc, roc_curve};
use crate::model::{DuettModel, EncoderOutput, ModelConfig};
use crate::ssl::{batch_ranges, divergence, MaskSpec};
use crate::{Error, Result};

pub const CLS_HIDDEN: usize = 64;

/// `rows·d → 64 → batch norm → ReLU → n_labels`, or a single linear map in
/// probe mode. Without a static row the static embedding is appended to the
/// input.
#[derive(Debug, Clone)]
pub struct ClsHead {
    pub hidden: Option<(Linear, BatchNorm1d)>,
    pub out: Linear,
    pub late_fusion: bool,
}

impl ClsHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, n_labels: usize, linear: bool, rng: &mut Rng) -> Self {
        let late_fusion = !cfg.static_row;
        let width = cfg.rows() * cfg.d + if late_fusion { cfg.d } else { 0 };
        if linear {
            Self {
                hidden: None,
                out: Linear::new(store, "cls.linear", width, n_labels, rng),
                late_fusion,
            }
        } else {
            let hidden = Linear::new(store, "cls.hidden", width, CLS_HIDDEN, rng);
            let norm = BatchNorm1d::new(store, "cls.norm", CLS_HIDDEN);
            Self {
                hidden: Some((hidden, norm)),
                out: Linear::new(store, "cls.out", CLS_HIDDEN, n_labels, rng),
                late_fusion,
            }
        }
    }

    /// Logits `[B, n_labels]` from the encoder output.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        cfg: &ModelConfig,
        enc: &EncoderOutput,
        training: bool,
    ) -> Result<(Var, Option<BatchNormUpdate>)> {
        let b = g.shape(enc.z)[0];
        let (rows, cols, d) = (cfg.rows(), cfg.cols(), cfg.d);
        let index = (0..b).flat_map(|bi| (0..rows).map(move |i| (bi * rows + i) * cols + cols - 1)).collect();
        let mut rep = g.gather_rows(enc.z, d, index, vec![b, rows * d])?;
        if self.late_fusion {
            rep = g.concat_last(rep, enc.static_emb)?;
        }
        let (h, update) = match &self.hidden {
            Some((lin, norm)) => {
                let h = lin.forward(g, store, rep)?;
                let (h, update) = norm.forward(g, store, h, training)?;
                (g.relu(h), update)
            }
            None => (rep, None),
        };
        Ok((self.out.forward(g, store, h)?, update))
    }
}

/// Positive and negative weights `(0.5/ρ, 0.5/(1−ρ))`.
pub fn class_weights(rho: f64) -> Result<(f64, f64)> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidArgument(format!("positive fraction {rho} must be strictly between 0 and 1")));
    }
    Ok((0.5 / rho, 0.5 / (1.0 - rho)))
}

/// Mean class-weighted binary cross-entropy over samples.
pub fn weighted_bce(probs: &[f64], labels: &[f64], rho: f64) -> Result<f64> {
    let (wp, wn) = class_weights(rho)?;
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::InvalidArgument("probabilities and labels must be non-empty and aligned".into()));
    }
    let eps = 1e-12;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(wp * y * p.ln() + wn * (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Positive rate of each task over `examples`.
pub fn positive_rates(examples: &[Example]) -> Vec<f64> {
    let n_labels = examples.first().map_or(0, |e| e.labels.len());
    (0..n_labels)
        .map(|t| examples.iter().map(|e| e.labels[t]).sum::<f64>() / examples.len() as f64)
        .collect()
}

/// One-based epochs of the `k` best scores; ties favour earlier epochs.
pub fn top_k_epochs(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    let mut epochs: Vec<usize> = idx.into_iter().map(|i| i + 1).collect();
    epochs.sort_unstable();
    epochs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Train the head only; the encoder runs in evaluation mode.
    pub freeze_encoder: bool,
    pub top_k: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.0,
            seed: 2020,
            freeze_encoder: false,
            top_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_pr_auc: f64,
    pub val_roc_auc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneOutcome {
    pub epochs: Vec<FinetuneEpoch>,
    /// One-based epochs whose weights were averaged.
    pub averaged: Vec<usize>,
}

pub fn write_finetune_csv<W: Write>(mut out: W, epochs: &[FinetuneEpoch]) -> Result<()> {
    writeln!(out, "epoch,train_loss,val_pr_auc,val_roc_auc,lr")?;
    for e in epochs {
        writeln!(out, "{},{},{},{},{}", e.epoch, e.train_loss, e.val_pr_auc, e.val_roc_auc, e.lr)?;
    }
    Ok(())
}

fn head<T>(model: &DuettModel<T>) -> Result<&ClsHead> {
    model
        .cls
        .as_ref()
        .map(|(_, h)| h)
        .ok_or_else(|| Error::InvalidArgument("model has no classification head".into()))
}

/// Trains the classifier (and, unless frozen, the encoder), then replaces the
/// weights with the mean of the `top_k` epochs by validation PR-AUC.
pub fn finetune<T: Real>(
    model: &mut DuettModel<T>,
    train: &[Example],
    val: &[Example],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    head(model)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("fine-tuning needs non-empty train and validation splits".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.top_k == 0 {
        return Err(Error::Config("epochs, batch_size and top_k must be positive".into()));
    }
    let weights = positive_rates(train)
        .into_iter()
        .enumerate()
        .map(|(t, rho)| {
            class_weights(rho).map_err(|_| Error::Data(format!("task {t} has positive rate {rho} in the training split")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mc = model.config.clone();
    let schedule = LrSchedule::new(cfg.peak_lr, cfg.warmup_steps.max(1));
    let hyper = AdamW {
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let mut opt = OptState::new(hyper, model.store.len());
    let frozen: Vec<ParamId> = if cfg.freeze_encoder {
        model.store.ids().filter(|&id| !model.store.entry(id).name.starts_with("cls.")).collect()
    } else {
        Vec::new()
    };
    let mut shuffle_rng = stream(cfg.seed, "finetune-shuffle");
    let mut dropout_rng = stream(cfg.seed, "finetune-dropout");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    // running best snapshots: (score, epoch, params)
    let mut kept: Vec<(f64, usize, ParamStore<T>)> = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut n_batches, mut lr) = (0.0, 0usize, 0.0);
        for r in batch_ranges(order.len(), cfg.batch_size) {
            let items: Vec<&Example> = order[r].iter().map(|&k| &train[k]).collect();
            let batch = Batch::new(&items)?;
            let mut g = Graph::new();
            g.freeze(frozen.iter().copied());
            let enc_training = !cfg.freeze_encoder;
            let enc = model.encoder.forward(&mut g, &model.store, &batch, None, enc_training, &mut dropout_rng)?;
            let (logits, head_update) = head(model)?.forward(&mut g, &model.store, &mc, &enc, true)?;
            let mut w = Vec::with_capacity(batch.labels.len());
            for b in 0..batch.size {
                for (t, &(wp, wn)) in weights.iter().enumerate() {
                    let y = batch.labels[b * batch.n_labels + t];
                    w.push(T::lit(if y > 0.5 { wp } else { wn } / batch.size as f64));
                }
            }
            let targets = batch.labels.iter().map(|&y| T::lit(y)).collect();
            let bce = g.bce_with_logits(logits, targets)?;
            let loss = g.weighted_sum(bce, w)?;
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::Divergence(format!("fine-tuning epoch {epoch}: loss is {value}")));
            }
            let grads = g.param_grads(loss).map_err(|e| divergence(&format!("fine-tuning epoch {epoch}"), e))?;
            lr = schedule.lr_at(opt.step() + 1);
            opt.update(&mut model.store, &grads, lr)?;
            if enc_training {
                model.apply_bn_updates(&enc.bn_updates);
            }
            model.apply_bn_updates(&head_update.into_iter().collect::<Vec<_>>());
            loss_sum += value;
            n_batches += 1;
        }
        let report = evaluate(model, val)?;
        let score = report
            .macro_pr_auc
            .ok_or_else(|| Error::Data("validation split has no positive labels".into()))?;
        log::info!("finetune epoch {epoch}: train {:.5} val PR-AUC {score:.4}", loss_sum / n_batches as f64);
        epochs.push(FinetuneEpoch {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            val_pr_auc: score,
            val_roc_auc: report.macro_roc_auc.unwrap_or(f64::NAN),
            lr,
        });
        if kept.len() < cfg.top_k {
            kept.push((score, epoch, model.store.clone()));
        } else if let Some(worst) = worst_kept(&kept) {
            if score > kept[worst].0 {
                kept[worst] = (score, epoch, model.store.clone());
            }
        }
    }
    let stores: Vec<&ParamStore<T>> = kept.iter().map(|(_, _, s)| s).collect();
    model.store = ParamStore::average(&stores)?;
    let mut averaged: Vec<usize> = kept.iter().map(|(_, e, _)| *e).collect();
    averaged.sort_unstable();
    Ok(FinetuneOutcome { epochs, averaged })
}

/// Lowest score, latest epoch on ties.
fn worst_kept<T>(kept: &[(f64, usize, ParamStore<T>)]) -> Option<usize> {
    (0..kept.len()).min_by(|&a, &b| kept[a].0.total_cmp(&kept[b].0).then(kept[b].1.cmp(&kept[a].1)))
}

/// Sigmoid probabilities `[N][n_labels]` in evaluation mode.
pub fn predict<T: Real>(model: &DuettModel<T>, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
    let h = head(model)?;
    let ranges: Vec<_> = batch_ranges(examples.len(), 128).collect();
    // batches are independent; collecting in order keeps results deterministic
    let chunks = ranges
        .into_par_iter()
        .map(|r| {
            let batch = Batch::from_slice(&examples[r])?;
            let mut g = Graph::new();
            let enc = model.encoder.forward(&mut g, &model.store, &batch, None, false, &mut stream(0, "unused"))?;
            let (logits, _) = h.forward(&mut g, &model.store, &model.config, &enc, false)?;
            let probs = g.sigmoid(logits);
            let n = g.shape(logits)[1];
            Ok(g.value(probs).to_f64_vec().chunks(n).map(|c| c.to_vec()).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskMetrics {
    pub task: String,
    pub n: usize,
    pub positives: usize,
    /// Absent when only one class is present.
    pub roc_auc: Option<f64>,
    /// Absent when there are no positives.
    pub pr_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskMetrics>,
    pub macro_roc_auc: Option<f64>,
    pub macro_pr_auc: Option<f64>,
    pub reconstruction_mse: Option<f64>,
    #[serde(skip)]
    pub scores: Vec<Vec<f64>>,
    #[serde(skip)]
    pub labels: Vec<Vec<bool>>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-task and macro metrics of the model's predictions on `examples`.
pub fn evaluate<T: Real>(model: &DuettModel<T>, examples: &[Example]) -> Result<EvalReport> {
    let (spec, _) = model.cls.as_ref().ok_or_else(|| Error::InvalidArgument("model has no classification head".into()))?;
    let probs = predict(model, examples)?;
    report_from_scores(&spec.tasks, &probs, examples)
}

pub fn report_from_scores(tasks: &[String], probs: &[Vec<f64>], examples: &[Example]) -> Result<EvalReport> {
    let mut metrics = Vec::new();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (t, name) in tasks.iter().enumerate() {
        let s: Vec<f64> = probs.iter().map(|p| p[t]).collect();
        let y: Vec<bool> = examples.iter().map(|e| e.labels[t] > 0.5).collect();
        let positives = y.iter().filter(|&&v| v).count();
        metrics.push(TaskMetrics {
            task: name.clone(),
            n: y.len(),
            positives,
            roc_auc: roc_auc(&s, &y).ok(),
            pr_auc: pr_auc(&s, &y).ok(),
        });
        scores.push(s);
        labels.push(y);
    }
    Ok(EvalReport {
        macro_roc_auc: mean_of(metrics.iter().filter_map(|m| m.roc_auc)),
        macro_pr_auc: mean_of(metrics.iter().filter_map(|m| m.pr_auc)),
        tasks: metrics,
        reconstruction_mse: None,
        scores,
        labels,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl EvalReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "task,n,positives,roc_auc,pr_auc")?;
        for m in &self.tasks {
            writeln!(out, "{},{},{},{},{}", m.task, m.n, m.positives, opt(m.roc_auc), opt(m.pr_auc))?;
        }
        writeln!(out, "macro,,,{},{}", opt(self.macro_roc_auc), opt(self.macro_pr_auc))?;
        if let Some(mse) = self.reconstruction_mse {
            writeln!(out, "reconstruction_mse,,,,{mse}")?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        for m in &self.tasks {
            s.push_str(&format!(
                "{}: ROC-AUC {} PR-AUC {} ({} of {} positive)\n",
                m.task,
                fmt(m.roc_auc),
                fmt(m.pr_auc),
                m.positives,
                m.n
            ));
        }
        s.push_str(&format!("macro: ROC-AUC {} PR-AUC {}\n", fmt(self.macro_roc_auc), fmt(self.macro_pr_auc)));
        if let Some(mse) = self.reconstruction_mse {
            s.push_str(&format!("reconstruction MSE {mse:.5}\n"));
        }
        s
    }

    /// ROC and PR points for every task, long format.
    pub fn write_curves<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "task,curve,threshold,x,y")?;
        for (t, m) in self.tasks.iter().enumerate() {
            for (kind, pts) in [
                ("roc", roc_curve(&self.scores[t], &self.labels[t])?),
                ("pr", pr_curve(&self.scores[t], &self.labels[t])?),
            ] {
                for p in pts {
                    writeln!(out, "{},{kind},{},{},{}", m.task, p.threshold, p.x, p.y)?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reconstruction {
    pub stay_id: String,
    pub predictions: Vec<f64>,
    pub targets: Vec<f64>,
    pub observed: Vec<bool>,
    /// Over observed bins; absent when the event was never observed.
    pub mse: Option<f64>,
}

/// Masks `target_event` in every stay and predicts its per-bin values with
/// the event-axis value head.
pub fn reconstruct_masked<T: Real>(model: &DuettModel<T>, examples: &[Example], target_event: usize) -> Result<Vec<Reconstruction>> {
    let cfg = &model.config;
    if target_event >= cfg.n_e {
        return Err(Error::InvalidArgument(format!("event {target_event} outside 0..{}", cfg.n_e)));
    }
    let (rows, cols, d, n_t) = (cfg.rows(), cfg.cols(), cfg.d, cfg.n_t);
    let mut dummy = stream(0, "unused");
    let mut out = Vec::with_capacity(examples.len());
    for r in batch_ranges(examples.len(), 128) {
        let chunk = &examples[r];
        let batch = Batch::from_slice(chunk)?;
        let specs = vec![
            MaskSpec {
                events: vec![target_event],
                bins: vec![],
            };
            batch.size
        ];
        let mut g = Graph::new();
        let enc = model.encoder.forward(&mut g, &model.store, &batch, Some(&specs), false, &mut dummy)?;
        let index = (0..batch.size).map(|b| b * rows + target_event).collect();
        let z = g.gather_rows(enc.z, cols * d, index, vec![batch.size, cols * d])?;
        let pred = model.ssl.event_value.forward(&mut g, &model.store, z)?;
        let pred = g.value(pred).to_f64_vec();
        for (b, ex) in chunk.iter().enumerate() {
            let predictions = pred[b * n_t..(b + 1) * n_t].to_vec();
            let targets: Vec<f64> = (0..n_t).map(|j| ex.binned.value(target_event, j)).collect();
            let observed: Vec<bool> = (0..n_t).map(|j| ex.binned.count(target_event, j) > 0).collect();
            let errs: Vec<f64> = (0..n_t)
                .filter(|&j| observed[j])
                .map(|j| (predictions[j] - targets[j]).powi(2))
                .collect();
            out.push(Reconstruction {
                stay_id: ex.stay_id.clone(),
                predictions,
                targets,
                observed,
                mse: mean_of(errs.into_iter()),
            });
        }
    }
    Ok(out)
}

/// Squared error pooled over every observed bin of the target event.
pub fn pooled_mse(recs: &[Reconstruction]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in recs {
        for j in 0..r.predictions.len() {
            if r.observed[j] {
                sum += (r.predictions[j] - r.targets[j]).powi(2);
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Zeroes the head so that every probability is one half; used in tests.
pub fn zero_head<T: Real>(model: &mut DuettModel<T>) {
    let ids: Vec<ParamId> = model.param_ids_with_prefix("cls.").collect();
    for id in ids {
        if model.store.entry(id).name.ends_with("running_var") || model.store.entry(id).name.ends_with("gamma") {
            continue;
        }
        let shape = model.store.get(id).shape().to_vec();
        model.store.set(id, Tensor::zeros(shape)).expect("same shape");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binning::{Aggregation, Window};
    use crate::dataset::prepare;
    use crate::model::HeadSpec;
    use crate::synth::{generate_synthetic, SynthConfig, LABEL_NAME};

    #[test]
    fn class_weight_formula() {
        assert_eq!(class_weights(0.5).unwrap(), (1.0, 1.0));
        let (p, n) = class_weights(0.1).unwrap();
        assert!((p - 5.0).abs() < 1e-12 && (n - 5.0 / 9.0).abs() < 1e-12);
        assert!(class_weights(0.0).is_err());
        assert!(class_weights(1.0).is_err());
    }

    #[test]
    fn balanced_weights_equal_plain_bce() {
        let p = [0.2, 0.9, 0.6];
        let y = [0.0, 1.0, 1.0];
        let plain = -((0.8f64).ln() + (0.9f64).ln() + (0.6f64).ln()) / 3.0;
        assert_eq!(weighted_bce(&p, &y, 0.5).unwrap(), plain);
        assert!(weighted_bce(&[1.0, 0.0], &[1.0, 0.0], 0.3).unwrap() < 1e-10);
    }

    #[test]
    fn top_k_selection() {
        assert_eq!(top_k_epochs(&[0.60, 0.62, 0.61, 0.65, 0.64, 0.63, 0.60], 5), vec![2, 3, 4, 5, 6]);
        assert_eq!(top_k_epochs(&[0.1, 0.2, 0.3], 5), vec![1, 2, 3]);
        assert_eq!(top_k_epochs(&[0.5, 0.5, 0.5], 2), vec![1, 2]);
    }

    fn tiny_examples(n: usize, seed: u64) -> Vec<Example> {
        let mut sc = SynthConfig::basic(3, 4, n);
        sc.sparsity = vec![0.7; 3];
        let stays = generate_synthetic(&sc, seed).unwrap();
        prepare(&stays, 3, 4, Window::Fixed(sc.window_days), Aggregation::Last, &[LABEL_NAME.to_string()]).unwrap()
    }

    fn tiny_model(linear: bool) -> DuettModel<f64> {
        let mut cfg = ModelConfig::new(3, 4, 2);
        cfg.d = 4;
        cfg.n_layers = 1;
        cfg.ffn_hidden = 8;
        cfg.n_heads = 2;
        DuettModel::new(&cfg, 1)
            .unwrap()
            .with_head(HeadSpec { tasks: vec![LABEL_NAME.to_string()], linear }, 1)
            .unwrap()
    }

    #[test]
    fn zero_head_gives_one_half() {
        let mut model = tiny_model(false);
        zero_head(&mut model);
        let probs = predict(&model, &tiny_examples(5, 1)).unwrap();
        assert_eq!(probs.len(), 5);
        assert!(probs.iter().all(|p| p.len() == 1 && p[0] == 0.5));
    }

    #[test]
    fn probe_leaves_encoder_untouched() {
        let mut model = tiny_model(true);
        let before = model.store.clone();
        let cfg = FinetuneConfig { epochs: 2, batch_size: 8, warmup_steps: 2, freeze_encoder: true, ..Default::default() };
        finetune(&mut model, &tiny_examples(40, 2), &tiny_examples(20, 3), &cfg).unwrap();
        let mut head_changed = false;
        for (a, b) in before.entries().iter().zip(model.store.entries()) {
            if a.name.starts_with("cls.") {
                head_changed |= a.value != b.value;
            } else {
                assert_eq!(a.value, b.value, "{} changed", a.name);
            }
        }
        assert!(head_changed);
    }

    #[test]
    fn short_runs_average_every_epoch() {
        let mut model = tiny_model(false);
        let cfg = FinetuneConfig { epochs: 3, batch_size: 8, warmup_steps: 2, ..Default::default() };
        let out = finetune(&mut model, &tiny_examples(40, 4), &tiny_examples(20, 5), &cfg).unwrap();
        assert_eq!(out.averaged, vec![1, 2, 3]);
        let probs = predict(&model, &tiny_examples(6, 6)).unwrap();
        assert!(probs.iter().all(|p| p[0] > 0.0 && p[0] < 1.0));
    }

    #[test]
    fn reconstruction_reports_absent_mse_for_unobserved_target() {
        let model = tiny_model(false);
        let mut ex = tiny_examples(2, 7);
        for j in 0..4 {
            let k = 4 + j;
            ex[0].binned.m[k] = 0;
            ex[0].binned.x[k] = 0.0;
        }
        let recs = reconstruct_masked(&model, &ex, 1).unwrap();
        assert_eq!(recs[0].mse, None);
        assert_eq!(recs[0].predictions.len(), 4);
        assert!(reconstruct_masked(&model, &ex, 3).is_err());
    }

    #[test]
    fn report_csv_and_summary() {
        let ex = tiny_examples(30, 8);
        let probs: Vec<Vec<f64>> = ex.iter().map(|e| vec![0.25 + 0.5 * e.labels[0]]).collect();
        let rep = report_from_scores(&[LABEL_NAME.to_string()], &probs, &ex).unwrap();
        assert_eq!(rep.macro_pr_auc, Some(1.0));
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("task,n,positives,roc_auc,pr_auc\noutcome,30,"));
        assert!(rep.summary().contains("PR-AUC 1.0000"));
        let mut curves = Vec::new();
        rep.write_curves(&mut curves).unwrap();
        assert!(String::from_utf8(curves).unwrap().lines().count() > 3);
    }
}
