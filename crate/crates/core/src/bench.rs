//! Seeded synthetic benchmark suites at desk scale.
//!
//! Every suite is a pure function of its configuration and seed: the seed
//! drives the generator, the split and all training randomness.

use std::io::Write;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{split, PatientStay, Vocabulary};
use crate::dataset::Example;
use crate::finetune::{evaluate, pooled_mse, reconstruct_masked};
use crate::pipeline::{metric, run_finetune, run_pretrain, sweep_labels, to_examples, Pretrained, SweepRow};
use crate::synth::{generate_synthetic, LabelRule, PlantedLink, SynthConfig, LABEL_NAME};
use crate::{Error, Result};

pub const DEFAULT_SEEDS: [u64; 3] = [2020, 2021, 2022];
/// 800 / 200 / 200 stays out of 1200.
pub const BENCH_FRACTIONS: [f64; 3] = [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0];
pub const SWEEP_FRACTIONS: [f64; 3] = [0.1, 0.3, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSuite {
    pub name: String,
    pub synth: SynthConfig,
    pub run: RunConfig,
    pub seeds: Vec<u64>,
    pub expected: Vec<String>,
    /// Masked-reconstruction target for reconstruction suites.
    pub target_event: Option<usize>,
}

fn desk_run() -> RunConfig {
    RunConfig {
        n_t: 16,
        ffn_hidden: 128,
        epochs: 20,
        finetune_epochs: 30,
        warmup_steps: 100,
        finetune_warmup_steps: 50,
        ..RunConfig::default()
    }
}

/// Twelve event types; `e11` copies `e00` in the same bin and `e01` two bins
/// earlier, so recovering it needs both cross-event and cross-time context.
pub fn reconstruction_suite() -> BenchSuite {
    let mut synth = SynthConfig::basic(12, 16, 1200);
    synth.sparsity = vec![0.8; 12];
    synth.noise_std = 0.1;
    synth.extra_events = 0.3;
    synth.jitter_std = 0.05;
    synth.links = vec![
        PlantedLink {
            source: 0,
            target: 11,
            lag: 0,
            weight: 0.8,
        },
        PlantedLink {
            source: 1,
            target: 11,
            lag: 2,
            weight: 0.8,
        },
    ];
    BenchSuite {
        name: "reconstruction".into(),
        synth,
        run: desk_run(),
        seeds: DEFAULT_SEEDS.to_vec(),
        expected: vec![
            "dual-axis masked MSE <= event-only and <= time-only on at least 2 of 3 seeds".into(),
            "dual-axis masked MSE below the predict-mean baseline".into(),
        ],
        target_event: Some(11),
    }
}

/// Sparse stays whose label depends on the late mean of a latent that also
/// drives the observed series and their missingness.
pub fn classification_suite() -> BenchSuite {
    let mut synth = SynthConfig::basic(12, 16, 1200);
    synth.sparsity = (0..12).map(|i| if i < 6 { 0.7 } else { 0.4 }).collect();
    synth.noise_std = 0.5;
    synth.extra_events = 0.3;
    synth.jitter_std = 0.1;
    synth.presence_coupling = 0.5;
    synth.label = LabelRule {
        weight: 6.0,
        bias: -1.5,
        late_fraction: 0.25,
    };
    synth.structure_seed = 1;
    BenchSuite {
        name: "classification".into(),
        synth,
        run: desk_run(),
        seeds: DEFAULT_SEEDS.to_vec(),
        expected: vec![
            "seed-averaged pretrained PR-AUC >= scratch PR-AUC at 10% labels".into(),
            "seed-averaged PR-AUC non-decreasing over 10%, 30%, 100% labels".into(),
        ],
        target_event: None,
    }
}

pub struct SuiteData {
    pub vocab: Vocabulary,
    pub train: Vec<PatientStay>,
    pub val: Vec<PatientStay>,
    pub test: Vec<PatientStay>,
}

pub fn suite_data(suite: &BenchSuite, seed: u64) -> Result<SuiteData> {
    let stays = generate_synthetic(&suite.synth, seed)?;
    let (train, val, test) = split(&stays, BENCH_FRACTIONS, seed)?;
    Ok(SuiteData {
        vocab: suite.synth.vocabulary(),
        train,
        val,
        test,
    })
}

fn seeded(suite: &BenchSuite, seed: u64) -> RunConfig {
    RunConfig {
        seed,
        ..suite.run.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructionResult {
    pub seed: u64,
    pub duett: f64,
    pub event_only: f64,
    pub time_only: f64,
    /// Predict-the-mean MSE, the variance of the observed targets.
    pub baseline: f64,
}

impl ReconstructionResult {
    pub fn ordered(&self) -> bool {
        self.duett <= self.event_only && self.duett <= self.time_only
    }
}

/// Pre-trains the dual-axis, event-only and time-only variants identically
/// and compares masked reconstruction of the target on the validation split.
pub fn bench_reconstruction(suite: &BenchSuite, seed: u64) -> Result<ReconstructionResult> {
    let target = suite
        .target_event
        .ok_or_else(|| Error::Config(format!("suite {} has no target event", suite.name)))?;
    let data = suite_data(suite, seed)?;
    let mut mses = Vec::with_capacity(3);
    let mut baseline = f64::NAN;
    for variant in ["full", "event_only", "time_only"] {
        let mut cfg = seeded(suite, seed);
        cfg.ablations.enable(variant)?;
        let pre = run_pretrain::<f32>(&cfg, &data.vocab, &data.train, &data.val)?;
        let recs = reconstruct_masked(&pre.model, &pre.val, target)?;
        mses.push(pooled_mse(&recs).ok_or_else(|| Error::Data("target never observed in validation".into()))?);
        baseline = target_variance(&pre.val, target);
    }
    Ok(ReconstructionResult {
        seed,
        duett: mses[0],
        event_only: mses[1],
        time_only: mses[2],
        baseline,
    })
}

/// Population variance of the target's observed binned values.
pub fn target_variance(examples: &[Example], target: usize) -> f64 {
    let values: Vec<f64> = examples
        .iter()
        .flat_map(|e| (0..e.binned.n_t).filter(move |&j| e.binned.count(target, j) > 0).map(move |j| e.binned.value(target, j)))
        .collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// A pre-trained model and labelled splits for the classification suites.
pub struct ClassificationRun {
    pub config: RunConfig,
    pub pretrained: Pretrained<f32>,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub tasks: Vec<String>,
}

pub fn prepare_classification(suite: &BenchSuite, seed: u64) -> Result<ClassificationRun> {
    let cfg = seeded(suite, seed);
    let data = suite_data(suite, seed)?;
    let pretrained = run_pretrain::<f32>(&cfg, &data.vocab, &data.train, &data.val)?;
    let tasks = vec![LABEL_NAME.to_string()];
    let norm = pretrained.meta.norm.clone().expect("pretraining fits normalization");
    let n_e = data.vocab.len();
    Ok(ClassificationRun {
        train: to_examples(&data.train, &norm, n_e, &cfg, &tasks)?,
        val: to_examples(&data.val, &norm, n_e, &cfg, &tasks)?,
        test: to_examples(&data.test, &norm, n_e, &cfg, &tasks)?,
        config: cfg,
        pretrained,
        tasks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SslGainResult {
    pub seed: u64,
    pub fraction: f64,
    pub pretrained: f64,
    pub scratch: f64,
    /// Positive rate of the test split, the PR-AUC of a random scorer.
    pub positive_rate: f64,
}

/// Fine-tunes from the pre-trained encoder and from random initialization
/// on the same labelled subsample with the same budget; test PR-AUCs.
pub fn bench_ssl_gain_with(run: &ClassificationRun, fraction: f64) -> Result<SslGainResult> {
    let cfg = &run.config;
    let subset: Vec<Example> = crate::data::label_subsample(run.train.len(), fraction, cfg.seed)?
        .into_iter()
        .map(|k| run.train[k].clone())
        .collect();
    let (tuned, _) = run_finetune(cfg, &run.pretrained.model, &subset, &run.val, &run.tasks, false)?;
    let pretrained = metric(evaluate(&tuned, &run.test)?.macro_pr_auc, "PR-AUC")?;
    let scratch_base = crate::model::DuettModel::<f32>::new(&run.pretrained.model.config, cfg.seed)?;
    let (scratch_model, _) = run_finetune(cfg, &scratch_base, &subset, &run.val, &run.tasks, false)?;
    let scratch = metric(evaluate(&scratch_model, &run.test)?.macro_pr_auc, "PR-AUC")?;
    let positive_rate = run.test.iter().filter(|e| e.labels[0] > 0.5).count() as f64 / run.test.len() as f64;
    Ok(SslGainResult {
        seed: cfg.seed,
        fraction,
        pretrained,
        scratch,
        positive_rate,
    })
}

pub fn bench_ssl_gain(suite: &BenchSuite, seed: u64) -> Result<SslGainResult> {
    bench_ssl_gain_with(&prepare_classification(suite, seed)?, 0.1)
}

/// Label-fraction sweep from the shared pre-trained encoder, scored on test.
pub fn bench_label_sweep(run: &ClassificationRun, fractions: &[f64]) -> Result<Vec<SweepRow>> {
    sweep_labels(&run.config, &run.pretrained.model, &run.train, &run.val, &run.test, &run.tasks, fractions)
}

/// Element-wise means of per-seed sweeps with matching fractions.
pub fn average_sweeps(sweeps: &[Vec<SweepRow>]) -> Vec<(f64, f64)> {
    let Some(first) = sweeps.first() else {
        return Vec::new();
    };
    first
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let mean = sweeps.iter().map(|s| s[k].pr_auc).sum::<f64>() / sweeps.len() as f64;
            (row.fraction, mean)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub suite: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

impl BenchRecord {
    pub fn new(suite: &str, seed: u64, metric: impl Into<String>, value: f64) -> Self {
        Self {
            suite: suite.into(),
            seed,
            metric: metric.into(),
            value,
        }
    }
}

impl ReconstructionResult {
    pub fn records(&self, suite: &str) -> Vec<BenchRecord> {
        vec![
            BenchRecord::new(suite, self.seed, "mse_duett", self.duett),
            BenchRecord::new(suite, self.seed, "mse_event_only", self.event_only),
            BenchRecord::new(suite, self.seed, "mse_time_only", self.time_only),
            BenchRecord::new(suite, self.seed, "mse_predict_mean", self.baseline),
        ]
    }
}

impl SslGainResult {
    pub fn records(&self, suite: &str) -> Vec<BenchRecord> {
        vec![
            BenchRecord::new(suite, self.seed, format!("pr_auc_pretrained@{}", self.fraction), self.pretrained),
            BenchRecord::new(suite, self.seed, format!("pr_auc_scratch@{}", self.fraction), self.scratch),
            BenchRecord::new(suite, self.seed, "positive_rate", self.positive_rate),
        ]
    }
}

pub fn sweep_records(suite: &str, seed: u64, rows: &[SweepRow]) -> Vec<BenchRecord> {
    rows.iter()
        .map(|r| BenchRecord::new(suite, seed, format!("pr_auc@{}", r.fraction), r.pr_auc))
        .collect()
}

pub fn write_results_csv<W: Write>(mut out: W, records: &[BenchRecord]) -> Result<()> {
    writeln!(out, "suite,seed,metric,value")?;
    for r in records {
        writeln!(out, "{},{},{},{}", r.suite, r.seed, r.metric, r.value)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shrink(mut suite: BenchSuite) -> BenchSuite {
        suite.synth.n_stays = 60;
        suite.synth.n_t = 4;
        suite.synth.links.iter_mut().for_each(|l| l.lag = l.lag.min(1));
        suite.run.n_t = 4;
        suite.run.d = 4;
        suite.run.n_heads = 2;
        suite.run.n_layers = 1;
        suite.run.ffn_hidden = 8;
        suite.run.epochs = 2;
        suite.run.finetune_epochs = 2;
        suite.run.top_k = 2;
        suite
    }

    #[test]
    fn suites_are_valid_and_reproducible() {
        for suite in [reconstruction_suite(), classification_suite()] {
            suite.synth.validate().unwrap();
            suite.run.validate().unwrap();
            assert_eq!(suite.seeds, DEFAULT_SEEDS);
        }
        let suite = shrink(reconstruction_suite());
        let a = bench_reconstruction(&suite, 3).unwrap();
        let b = bench_reconstruction(&suite, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.baseline > 0.0);
    }

    #[test]
    fn ssl_gain_pair_is_reproducible() {
        let mut suite = shrink(classification_suite());
        suite.synth.label.bias = 0.0;
        let a = bench_ssl_gain_with(&prepare_classification(&suite, 4).unwrap(), 0.5).unwrap();
        let b = bench_ssl_gain_with(&prepare_classification(&suite, 4).unwrap(), 0.5).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &a.records("c")).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }

    #[test]
    fn sweep_average_is_elementwise() {
        let row = |f, p| SweepRow {
            fraction: f,
            n_train: 1,
            pr_auc: p,
            roc_auc: 0.5,
        };
        let avg = average_sweeps(&[vec![row(0.1, 0.2), row(1.0, 0.6)], vec![row(0.1, 0.4), row(1.0, 0.8)]]);
        assert_eq!(avg.len(), 2);
        assert!((avg[0].1 - 0.3).abs() < 1e-12 && (avg[1].1 - 0.7).abs() < 1e-12);
    }
}
