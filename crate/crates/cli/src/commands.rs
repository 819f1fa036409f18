//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use duett_core::bench::{classification_suite, reconstruction_suite};
use duett_core::checkpoint::{load_file, save_file, CheckpointMeta};
use duett_core::config::RunConfig;
use duett_core::data::{fit_norm, split, write_stays, NormStats, Vocabulary, DEFAULT_FRACTIONS};
use duett_core::finetune::{pooled_mse, reconstruct_masked, write_finetune_csv, EvalReport};
use duett_core::model::DuettModel;
use duett_core::pipeline::{
    evaluate_with_reconstruction, read_stays, read_stays_with, resolve_tasks, run_finetune, run_pretrain, sweep_labels,
    to_examples, write_sweep_csv,
};
use duett_core::ssl::write_pretrain_csv;
use duett_core::synth::{generate_synthetic, SynthConfig};
use duett_core::{Error, Result};
use duett_tensor::{Precision, Real};

use crate::beside;

/// Runs `$body` with `$t` bound to the element type of `$precision`.
macro_rules! with_precision {
    ($precision:expr, $t:ident => $body:expr) => {
        match $precision {
            Precision::Single => {
                type $t = f32;
                $body
            }
            Precision::Double => {
                type $t = f64;
                $body
            }
        }
    };
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    RunConfig::parse(&text)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_resolved(path: &Path, text: &str) -> Result<()> {
    let mut out = create(path)?;
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn settings_text(settings: &BTreeMap<String, String>) -> String {
    settings.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Run settings recorded in a checkpoint.
fn checkpoint_config(meta: &CheckpointMeta) -> Result<RunConfig> {
    RunConfig::parse(&settings_text(&meta.settings))
        .map_err(|e| Error::Checkpoint(format!("checkpoint settings are unusable: {e}")))
}

fn checkpoint_norm(meta: &CheckpointMeta) -> Result<&NormStats> {
    meta.norm
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no normalization statistics".into()))
}

/// Binning must match the checkpoint; other settings may differ.
fn check_compatible(cfg: &RunConfig, saved: &RunConfig) -> Result<()> {
    if cfg.n_t != saved.n_t {
        return Err(Error::Config(format!("n_t = {} but the checkpoint was trained with {}", cfg.n_t, saved.n_t)));
    }
    if cfg.window_days != saved.window_days || cfg.aggregation != saved.aggregation {
        log::warn!("window or aggregation differ from the checkpoint's settings");
    }
    Ok(())
}

pub fn generate(preset: &str, n_stays: Option<usize>, seed: u64, out: &Path) -> Result<()> {
    let mut synth = match preset {
        "basic" => SynthConfig::basic(12, 16, 1200),
        "reconstruction" => reconstruction_suite().synth,
        "classification" => classification_suite().synth,
        other => return Err(Error::InvalidArgument(format!("unknown preset {other:?}"))),
    };
    if let Some(n) = n_stays {
        synth.n_stays = n;
    }
    let stays = generate_synthetic(&synth, seed)?;
    let mut w = create(out)?;
    write_stays(&mut w, &stays, &synth.vocabulary())?;
    w.flush()?;
    write_resolved(&beside(out, ".synth.json"), &serde_json::to_string_pretty(&synth)?)?;
    println!("wrote {} stays to {}", stays.len(), out.display());
    Ok(())
}

pub fn preprocess(config: &Path, data: &Path, out_dir: &Path) -> Result<()> {
    let cfg = read_config(config)?;
    let (stays, vocab) = read_stays(data)?;
    let (train, val, test) = split(&stays, DEFAULT_FRACTIONS, cfg.seed)?;
    let norm = fit_norm(&train, vocab.len(), cfg.normalize_static)?;
    fs::create_dir_all(out_dir)?;
    for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
        let mut w = create(&out_dir.join(format!("{name}.jsonl")))?;
        write_stays(&mut w, part, &vocab)?;
        w.flush()?;
    }
    write_resolved(&out_dir.join("norm.json"), &serde_json::to_string_pretty(&norm)?)?;
    write_resolved(&out_dir.join("vocab.json"), &serde_json::to_string_pretty(&vocab)?)?;
    write_resolved(&out_dir.join("resolved.cfg"), &cfg.to_text())?;
    println!(
        "{} event types; {} train, {} val, {} test stays",
        vocab.len(),
        train.len(),
        val.len(),
        test.len()
    );
    Ok(())
}

pub fn pretrain(config: &Path, data: &Path, val: &Path, out: &Path) -> Result<()> {
    let cfg = read_config(config)?;
    let (train, vocab) = read_stays(data)?;
    let val = read_stays_with(val, &vocab)?;
    with_precision!(cfg.precision, T => {
        let pre = run_pretrain::<T>(&cfg, &vocab, &train, &val)?;
        save_file(&pre.model, &pre.meta, out)?;
        write_pretrain_csv(create(&beside(out, ".epochs.csv"))?, &pre.outcome.epochs)?;
        println!("kept epoch {} of {}; {} parameters", pre.outcome.best_epoch, pre.outcome.epochs.len(), pre.model.num_params());
    });
    write_resolved(&beside(out, ".resolved.cfg"), &cfg.to_text())
}

fn write_report(report: &EvalReport, csv: &Path, prefix_for: &Path) -> Result<()> {
    let mut w = create(csv)?;
    report.write_csv(&mut w)?;
    w.flush()?;
    write_resolved(&beside(prefix_for, ".summary.txt"), &report.summary())?;
    let mut curves = Vec::new();
    match report.write_curves(&mut curves) {
        Ok(()) => write_resolved(&beside(prefix_for, ".curves.csv"), &String::from_utf8_lossy(&curves))?,
        Err(e) => log::warn!("curves not written: {e}"),
    }
    print!("{}", report.summary());
    Ok(())
}

pub fn tune(config: &Path, checkpoint: &Path, data: &Path, val: &Path, test: Option<&Path>, out: &Path, probe: bool) -> Result<()> {
    let cfg = read_config(config)?;
    with_precision!(cfg.precision, T => {
        let (base, meta) = load_file::<T>(checkpoint)?;
        check_compatible(&cfg, &checkpoint_config(&meta)?)?;
        let norm = checkpoint_norm(&meta)?;
        let n_e = meta.vocabulary.len();
        let train = read_stays_with(data, &meta.vocabulary)?;
        let tasks = resolve_tasks(&cfg, &train)?;
        let train = to_examples(&train, norm, n_e, &cfg, &tasks)?;
        let val = to_examples(&read_stays_with(val, &meta.vocabulary)?, norm, n_e, &cfg, &tasks)?;
        let (model, outcome) = run_finetune(&cfg, &base, &train, &val, &tasks, probe)?;
        let eval = match test {
            Some(p) => to_examples(&read_stays_with(p, &meta.vocabulary)?, norm, n_e, &cfg, &tasks)?,
            None => val,
        };
        let report = evaluate_with_reconstruction(&model, &eval, None)?;
        let meta = CheckpointMeta { settings: cfg.settings(), ..meta };
        save_file(&model, &meta, out)?;
        write_finetune_csv(create(&beside(out, ".epochs.csv"))?, &outcome.epochs)?;
        write_report(&report, &beside(out, ".report.csv"), out)?;
        println!("averaged epochs {:?}", outcome.averaged);
    });
    write_resolved(&beside(out, ".resolved.cfg"), &cfg.to_text())
}

/// Loads a checkpoint at the precision recorded in its own settings.
fn with_checkpoint<F32, F64>(checkpoint: &Path, single: F32, double: F64) -> Result<()>
where
    F32: FnOnce(DuettModel<f32>, CheckpointMeta, RunConfig) -> Result<()>,
    F64: FnOnce(DuettModel<f64>, CheckpointMeta, RunConfig) -> Result<()>,
{
    let (model, meta) = load_file::<f32>(checkpoint)?;
    let cfg = checkpoint_config(&meta)?;
    match cfg.precision {
        Precision::Single => single(model, meta, cfg),
        Precision::Double => {
            let (model, meta) = load_file::<f64>(checkpoint)?;
            double(model, meta, cfg)
        }
    }
}

fn event_index(vocab: &Vocabulary, name: &str) -> Result<usize> {
    vocab
        .get(name)
        .ok_or_else(|| Error::InvalidArgument(format!("event type {name:?} is not in the checkpoint vocabulary")))
}

fn eval_typed<T: Real>(model: DuettModel<T>, meta: CheckpointMeta, cfg: RunConfig, data: &Path, event: Option<&str>, out: &Path) -> Result<()> {
    let (spec, _) = model
        .cls
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no classification head; fine-tune it first".into()))?;
    let target = event.map(|e| event_index(&meta.vocabulary, e)).transpose()?;
    let stays = read_stays_with(data, &meta.vocabulary)?;
    let examples = to_examples(&stays, checkpoint_norm(&meta)?, meta.vocabulary.len(), &cfg, &spec.tasks)?;
    let report = evaluate_with_reconstruction(&model, &examples, target)?;
    write_report(&report, out, out)?;
    write_resolved(&beside(out, ".resolved.cfg"), &cfg.to_text())
}

pub fn eval(checkpoint: &Path, data: &Path, event: Option<&str>, out: &Path) -> Result<()> {
    with_checkpoint(
        checkpoint,
        |m, meta, cfg| eval_typed(m, meta, cfg, data, event, out),
        |m, meta, cfg| eval_typed(m, meta, cfg, data, event, out),
    )
}

fn reconstruct_typed<T: Real>(model: DuettModel<T>, meta: CheckpointMeta, cfg: RunConfig, data: &Path, event: &str, out: &Path) -> Result<()> {
    let target = event_index(&meta.vocabulary, event)?;
    let stays = read_stays_with(data, &meta.vocabulary)?;
    let examples = to_examples(&stays, checkpoint_norm(&meta)?, meta.vocabulary.len(), &cfg, &[])?;
    let recs = reconstruct_masked(&model, &examples, target)?;
    let mut w = create(out)?;
    writeln!(w, "stay_id,bin,observed,target,prediction")?;
    for r in &recs {
        for j in 0..r.predictions.len() {
            writeln!(w, "{},{j},{},{},{}", r.stay_id, u8::from(r.observed[j]), r.targets[j], r.predictions[j])?;
        }
    }
    w.flush()?;
    match pooled_mse(&recs) {
        Some(mse) => println!("{event}: masked reconstruction MSE {mse:.5} over {} stays", recs.len()),
        None => println!("{event}: never observed; MSE undefined"),
    }
    write_resolved(&beside(out, ".resolved.cfg"), &cfg.to_text())
}

pub fn reconstruct(checkpoint: &Path, data: &Path, event: &str, out: &Path) -> Result<()> {
    with_checkpoint(
        checkpoint,
        |m, meta, cfg| reconstruct_typed(m, meta, cfg, data, event, out),
        |m, meta, cfg| reconstruct_typed(m, meta, cfg, data, event, out),
    )
}

pub fn sweep(config: &Path, checkpoint: &Path, data: &Path, val: &Path, test: Option<&Path>, fractions: &[f64], out: &Path) -> Result<()> {
    let cfg = read_config(config)?;
    if let Some(f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::InvalidArgument(format!("label fraction {f} must be in (0, 1]")));
    }
    with_precision!(cfg.precision, T => {
        let (base, meta) = load_file::<T>(checkpoint)?;
        check_compatible(&cfg, &checkpoint_config(&meta)?)?;
        let norm = checkpoint_norm(&meta)?;
        let n_e = meta.vocabulary.len();
        let train = read_stays_with(data, &meta.vocabulary)?;
        let tasks = resolve_tasks(&cfg, &train)?;
        let train = to_examples(&train, norm, n_e, &cfg, &tasks)?;
        let val = to_examples(&read_stays_with(val, &meta.vocabulary)?, norm, n_e, &cfg, &tasks)?;
        let eval = match test {
            Some(p) => to_examples(&read_stays_with(p, &meta.vocabulary)?, norm, n_e, &cfg, &tasks)?,
            None => val.clone(),
        };
        let rows = sweep_labels(&cfg, &base, &train, &val, &eval, &tasks, fractions)?;
        let mut w = create(out)?;
        write_sweep_csv(&mut w, &rows)?;
        w.flush()?;
        for r in &rows {
            println!("{:>5}% labels ({} stays): PR-AUC {:.4}", r.fraction * 100.0, r.n_train, r.pr_auc);
        }
    });
    write_resolved(&beside(out, ".resolved.cfg"), &cfg.to_text())
}

/// Parameter counts grouped by component.
pub fn parameter_groups<T: Real>(model: &DuettModel<T>) -> BTreeMap<String, usize> {
    let mut groups = BTreeMap::new();
    for e in model.store.entries() {
        let parts: Vec<&str> = e.name.split('.').collect();
        let group = match parts.as_slice() {
            ["layers", _, _, axis, ..] => format!("layers.{axis}"),
            ["axis", axis, ..] => format!("axis.{axis}"),
            [first, ..] => first.to_string(),
            [] => String::new(),
        };
        *groups.entry(group).or_insert(0) += e.value.numel();
    }
    groups
}

pub fn ablate(config: &Path, variant: &str, data: &Path, val: &Path, test: Option<&Path>, out_dir: &Path) -> Result<()> {
    let mut cfg = read_config(config)?;
    cfg.ablations.enable(variant)?;
    cfg.validate()?;
    let (train_stays, vocab) = read_stays(data)?;
    let val_stays = read_stays_with(val, &vocab)?;
    let test_stays = test.map(|p| read_stays_with(p, &vocab)).transpose()?;
    fs::create_dir_all(out_dir)?;
    with_precision!(cfg.precision, T => {
        let pre = run_pretrain::<T>(&cfg, &vocab, &train_stays, &val_stays)?;
        save_file(&pre.model, &pre.meta, &out_dir.join("pretrain.bin"))?;
        write_pretrain_csv(create(&out_dir.join("pretrain.epochs.csv"))?, &pre.outcome.epochs)?;
        let norm = checkpoint_norm(&pre.meta)?;
        let tasks = resolve_tasks(&cfg, &train_stays)?;
        let n_e = vocab.len();
        let train = to_examples(&train_stays, norm, n_e, &cfg, &tasks)?;
        let val = to_examples(&val_stays, norm, n_e, &cfg, &tasks)?;
        let (model, outcome) = run_finetune(&cfg, &pre.model, &train, &val, &tasks, false)?;
        let eval = match &test_stays {
            Some(s) => to_examples(s, norm, n_e, &cfg, &tasks)?,
            None => val,
        };
        let report = evaluate_with_reconstruction(&model, &eval, None)?;
        save_file(&model, &pre.meta, &out_dir.join("finetune.bin"))?;
        write_finetune_csv(create(&out_dir.join("finetune.epochs.csv"))?, &outcome.epochs)?;
        write_report(&report, &out_dir.join("report.csv"), &out_dir.join("report"))?;
        let mut w = create(&out_dir.join("params.csv"))?;
        writeln!(w, "group,parameters")?;
        for (g, n) in parameter_groups(&model) {
            writeln!(w, "{g},{n}")?;
        }
        writeln!(w, "total,{}", model.num_params())?;
        w.flush()?;
    });
    write_resolved(&out_dir.join("resolved.cfg"), &cfg.to_text())
}
