//! End-to-end stages shared by the command-line driver and the benchmarks.
//!
//! Normalization statistics are fitted on the stays a model is pre-trained
//! on and travel with the checkpoint; later stages reuse them.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use duett_tensor::Real;
use serde::Serialize;

use crate::checkpoint::CheckpointMeta;
use crate::config::RunConfig;
use crate::data::{apply_norm, fit_norm, label_subsample, parse_stays, parse_stays_with, NormStats, PatientStay, Vocabulary};
use crate::dataset::{prepare, Example};
use crate::finetune::{evaluate, finetune, EvalReport, FinetuneOutcome};
use crate::model::{DuettModel, HeadSpec};
use crate::ssl::{pretrain, PretrainOutcome};
use crate::{Error, Result};

/// Reads a stay file, growing a fresh vocabulary in first-seen order.
pub fn read_stays(path: &Path) -> Result<(Vec<PatientStay>, Vocabulary)> {
    parse_stays(BufReader::new(File::open(path)?))
}

/// Reads a stay file against a fixed vocabulary; unknown types are dropped.
pub fn read_stays_with(path: &Path, vocab: &Vocabulary) -> Result<Vec<PatientStay>> {
    let mut v = vocab.clone();
    parse_stays_with(BufReader::new(File::open(path)?), &mut v, false)
}

/// Configured task names, or every label of the first stay.
pub fn resolve_tasks(cfg: &RunConfig, stays: &[PatientStay]) -> Result<Vec<String>> {
    if !cfg.tasks.is_empty() {
        return Ok(cfg.tasks.clone());
    }
    let tasks: Vec<String> = stays.first().map(|s| s.labels.keys().cloned().collect()).unwrap_or_default();
    if tasks.is_empty() {
        return Err(Error::Data("no tasks configured and the first stay carries no labels".into()));
    }
    Ok(tasks)
}

/// Normalizes and bins stays.
pub fn to_examples(stays: &[PatientStay], norm: &NormStats, n_e: usize, cfg: &RunConfig, tasks: &[String]) -> Result<Vec<Example>> {
    let normalized: Vec<PatientStay> = stays.iter().map(|s| apply_norm(s, norm)).collect();
    prepare(&normalized, n_e, cfg.n_t, cfg.window_days, cfg.aggregation, tasks)
}

fn n_static(stays: &[PatientStay]) -> usize {
    stays.first().map_or(0, |s| s.statics.len())
}

pub struct Pretrained<T> {
    pub model: DuettModel<T>,
    pub meta: CheckpointMeta,
    pub outcome: PretrainOutcome,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

/// Fits normalization on `train` and pre-trains a fresh model. With the
/// `no_ssl` ablation the freshly initialized model is returned untrained.
pub fn run_pretrain<T: Real>(cfg: &RunConfig, vocab: &Vocabulary, train: &[PatientStay], val: &[PatientStay]) -> Result<Pretrained<T>> {
    let n_e = vocab.len();
    if n_e == 0 {
        return Err(Error::Data("vocabulary is empty".into()));
    }
    let norm = fit_norm(train, n_e, cfg.normalize_static)?;
    let train_ex = to_examples(train, &norm, n_e, cfg, &[])?;
    let val_ex = to_examples(val, &norm, n_e, cfg, &[])?;
    let mut model = DuettModel::<T>::new(&cfg.model_config(n_e, n_static(train)), cfg.seed)?;
    let outcome = if cfg.ablations.no_ssl {
        PretrainOutcome {
            best_epoch: 0,
            epochs: Vec::new(),
        }
    } else {
        pretrain(&mut model, &train_ex, &val_ex, &cfg.pretrain_config())?
    };
    let meta = CheckpointMeta {
        vocabulary: vocab.clone(),
        norm: Some(norm),
        settings: cfg.settings(),
    };
    Ok(Pretrained {
        model,
        meta,
        outcome,
        train: train_ex,
        val: val_ex,
    })
}

/// A fresh model with a classification head, encoder weights copied from
/// `base`. `probe` selects the single linear head and a frozen encoder.
pub fn init_classifier<T: Real>(cfg: &RunConfig, base: &DuettModel<T>, tasks: &[String], probe: bool) -> Result<DuettModel<T>> {
    let spec = HeadSpec {
        tasks: tasks.to_vec(),
        linear: probe,
    };
    let mut model = DuettModel::<T>::new(&base.config, cfg.seed)?.with_head(spec, cfg.seed)?;
    let missing = model.store.load_matching(&base.store);
    if let Some(name) = missing.iter().find(|n| !n.starts_with("cls.")) {
        return Err(Error::Checkpoint(format!("checkpoint lacks encoder parameter {name}")));
    }
    Ok(model)
}

pub fn run_finetune<T: Real>(
    cfg: &RunConfig,
    base: &DuettModel<T>,
    train: &[Example],
    val: &[Example],
    tasks: &[String],
    probe: bool,
) -> Result<(DuettModel<T>, FinetuneOutcome)> {
    let mut model = init_classifier(cfg, base, tasks, probe)?;
    let outcome = finetune(&mut model, train, val, &cfg.finetune_config(probe))?;
    Ok((model, outcome))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub n_train: usize,
    pub pr_auc: f64,
    pub roc_auc: f64,
}

/// Fine-tunes on nested stay-level subsamples of `train` and scores each
/// model on `eval`.
pub fn sweep_labels<T: Real>(
    cfg: &RunConfig,
    base: &DuettModel<T>,
    train: &[Example],
    val: &[Example],
    eval: &[Example],
    tasks: &[String],
    fractions: &[f64],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let subset: Vec<Example> = label_subsample(train.len(), fraction, cfg.seed)?
            .into_iter()
            .map(|k| train[k].clone())
            .collect();
        let (model, _) = run_finetune(cfg, base, &subset, val, tasks, false)?;
        let report = evaluate(&model, eval)?;
        rows.push(SweepRow {
            fraction,
            n_train: subset.len(),
            pr_auc: metric(report.macro_pr_auc, "PR-AUC")?,
            roc_auc: report.macro_roc_auc.unwrap_or(f64::NAN),
        });
    }
    Ok(rows)
}

pub(crate) fn metric(v: Option<f64>, name: &str) -> Result<f64> {
    v.ok_or_else(|| Error::Data(format!("{name} undefined on the evaluation split")))
}

pub fn write_sweep_csv<W: std::io::Write>(mut out: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(out, "fraction,n_train,pr_auc,roc_auc")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.fraction, r.n_train, r.pr_auc, r.roc_auc)?;
    }
    Ok(())
}

/// Evaluation plus masked reconstruction of one event type when requested.
pub fn evaluate_with_reconstruction<T: Real>(model: &DuettModel<T>, examples: &[Example], target_event: Option<usize>) -> Result<EvalReport> {
    let mut report = evaluate(model, examples)?;
    if let Some(e) = target_event {
        let recs = crate::finetune::reconstruct_masked(model, examples, e)?;
        report.reconstruction_mse = crate::finetune::pooled_mse(&recs);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split;
    use crate::synth::{generate_synthetic, SynthConfig, LABEL_NAME};

    fn tiny_config() -> RunConfig {
        RunConfig::parse(
            "n_t = 4\nd = 4\nL = 1\nn_heads = 2\nffn_hidden = 8\nepochs = 2\nfinetune_epochs = 3\n\
             batch_size = 8\ntop_k = 2\nwarmup_steps = 2\nfinetune_warmup_steps = 2\nseed = 5\n",
        )
        .unwrap()
    }

    fn data() -> (Vec<PatientStay>, Vec<PatientStay>, Vec<PatientStay>, Vocabulary) {
        let synth = SynthConfig::basic(3, 4, 60);
        let stays = generate_synthetic(&synth, 1).unwrap();
        let (a, b, c) = split(&stays, [0.6, 0.2, 0.2], 1).unwrap();
        (a, b, c, synth.vocabulary())
    }

    #[test]
    fn pretrain_then_finetune_copies_the_encoder() {
        let cfg = tiny_config();
        let (train, val, _, vocab) = data();
        let pre = run_pretrain::<f32>(&cfg, &vocab, &train, &val).unwrap();
        assert_eq!(pre.outcome.epochs.len(), 2);
        let tasks = resolve_tasks(&cfg, &train).unwrap();
        assert_eq!(tasks, vec![LABEL_NAME]);
        let model = init_classifier(&cfg, &pre.model, &tasks, false).unwrap();
        for e in pre.model.store.entries() {
            let id = model.store.id(&e.name).unwrap();
            assert_eq!(model.store.get(id), &e.value);
        }
    }

    #[test]
    fn full_fraction_sweep_matches_plain_finetune() {
        let cfg = tiny_config();
        let (train, val, test, vocab) = data();
        let pre = run_pretrain::<f32>(&cfg, &vocab, &train, &val).unwrap();
        let norm = pre.meta.norm.as_ref().unwrap();
        let tasks = resolve_tasks(&cfg, &train).unwrap();
        let tr = to_examples(&train, norm, vocab.len(), &cfg, &tasks).unwrap();
        let va = to_examples(&val, norm, vocab.len(), &cfg, &tasks).unwrap();
        let te = to_examples(&test, norm, vocab.len(), &cfg, &tasks).unwrap();
        let rows = sweep_labels(&cfg, &pre.model, &tr, &va, &te, &tasks, &[1.0]).unwrap();
        let (model, _) = run_finetune(&cfg, &pre.model, &tr, &va, &tasks, false).unwrap();
        let report = evaluate(&model, &te).unwrap();
        assert_eq!(rows[0].pr_auc, report.macro_pr_auc.unwrap());
        assert!(sweep_labels(&cfg, &pre.model, &tr, &va, &te, &tasks, &[0.0]).is_err());
    }

    #[test]
    fn no_ssl_skips_pretraining() {
        let mut cfg = tiny_config();
        cfg.ablations.no_ssl = true;
        let (train, val, _, vocab) = data();
        let pre = run_pretrain::<f32>(&cfg, &vocab, &train, &val).unwrap();
        let fresh = DuettModel::<f32>::new(&pre.model.config, cfg.seed).unwrap();
        assert!(pre.outcome.epochs.is_empty());
        assert_eq!(pre.model.store.entries(), fresh.store.entries());
    }
}
