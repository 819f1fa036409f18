//! Acceptance gate: criteria 1 to 11, run sequentially so each wall-clock
//! budget is measured without competing test threads. Prints one PASS/FAIL
//! line per criterion and fails if any criterion fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use duett_core::bench::{
    average_sweeps, bench_label_sweep, bench_reconstruction, bench_ssl_gain_with, classification_suite, prepare_classification,
    reconstruction_suite, ClassificationRun, SWEEP_FRACTIONS,
};
use duett_core::binning::{bin_stay, Aggregation};
use duett_core::checkpoint::save;
use duett_core::config::RunConfig;
use duett_core::data::{apply_norm, fit_norm, fit_type, split, EventTriplet, PatientStay};
use duett_core::dataset::Batch;
use duett_core::finetune::evaluate;
use duett_core::metrics::{pr_auc, roc_auc};
use duett_core::model::{Axis, DuettModel, HeadSpec, Layout, ModelConfig};
use duett_core::pipeline::{resolve_tasks, run_finetune, run_pretrain, to_examples};
use duett_core::ssl::{cell_loss, sample_mask, ssl_loss, LossWeights, MaskSpec};
use duett_core::synth::{generate_synthetic, SynthConfig};
use duett_tensor::gradcheck::{compare, primitive_suite};
use duett_tensor::rng::{stream, Rng};
use duett_tensor::{Graph, Tensor};
use rand::Rng as _;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, minutes: f64) -> bool {
    elapsed.as_secs_f64() < minutes * 60.0
}

fn random_batch(cfg: &ModelConfig, b: usize, rng: &mut Rng) -> Batch {
    let n = b * cfg.n_e * cfg.n_t;
    let window = rng.random_range(0.5..3.0);
    Batch {
        size: b,
        n_e: cfg.n_e,
        n_t: cfg.n_t,
        n_static: cfg.n_static,
        n_labels: 1,
        x: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        m: (0..n).map(|_| if rng.random_bool(0.4) { 0 } else { rng.random_range(1..4) }).collect(),
        statics: (0..b * cfg.n_static).map(|_| rng.random_range(-1.0..1.0)).collect(),
        times: (0..b)
            .flat_map(|_| (1..=cfg.n_t).map(|j| j as f64 * window / cfg.n_t as f64).chain([window]).collect::<Vec<_>>())
            .collect(),
        labels: (0..b).map(|k| (k % 2) as f64).collect(),
    }
}

fn tiny_config(layout: Layout, static_row: bool) -> ModelConfig {
    let mut cfg = ModelConfig::new(2, 3, 2);
    cfg.d = 4;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.ffn_hidden = 6;
    cfg.dropout = 0.0;
    cfg.layout = layout;
    cfg.static_row = static_row;
    cfg
}

/// SSL plus classification loss of the whole model, in training mode.
fn model_loss(model: &DuettModel<f64>, batch: &Batch, specs: &[MaskSpec]) -> (Graph<f64>, duett_tensor::Var) {
    let mut g = Graph::new();
    let mut rng = stream(0, "dropout");
    let out = model.encoder.forward(&mut g, &model.store, batch, Some(specs), true, &mut rng).unwrap();
    let (ssl, _) = ssl_loss(&mut g, &model.store, &model.ssl, &model.config, out.z, batch, specs, LossWeights::default()).unwrap();
    let (_, head) = model.cls.as_ref().unwrap();
    let (logits, _) = head.forward(&mut g, &model.store, &model.config, &out, true).unwrap();
    let bce = g.bce_with_logits(logits, batch.labels.clone()).unwrap();
    let cls = g.sum(bce);
    let loss = g.add(ssl, cls).unwrap();
    (g, loss)
}

fn model_gradcheck(cfg: &ModelConfig, linear_head: bool, seed: u64) -> f64 {
    let mut model = DuettModel::<f64>::new(cfg, seed)
        .unwrap()
        .with_head(HeadSpec { tasks: vec!["y".into()], linear: linear_head }, seed)
        .unwrap();
    let mut rng = stream(seed, "e2e-batch");
    let batch = random_batch(cfg, 3, &mut rng);
    let specs: Vec<MaskSpec> = (0..3).map(|_| sample_mask(cfg.n_e, cfg.n_t, 1, 1, &mut rng).unwrap()).collect();
    let (g, loss) = model_loss(&model, &batch, &specs);
    let grads: BTreeMap<_, _> = g.param_grads(loss).unwrap().into_iter().collect();
    let ids: Vec<_> = grads.keys().copied().collect();
    let h = 1e-6;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for id in ids {
        let base = model.store.get(id).clone();
        let mut num = Tensor::zeros(base.shape().to_vec());
        for j in 0..base.numel() {
            let mut eval_at = |v: f64| {
                let mut t = base.clone();
                t.data_mut()[j] = v;
                model.store.set(id, t).unwrap();
                let (g, loss) = model_loss(&model, &batch, &specs);
                g.value(loss).item()
            };
            let x = base.data()[j];
            num.data_mut()[j] = (eval_at(x + h) - eval_at(x - h)) / (2.0 * h);
        }
        model.store.set(id, base).unwrap();
        analytic.push(grads[&id].clone());
        numeric.push(num);
    }
    compare(&analytic, &numeric).rel_error
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let prims = primitive_suite(20, 2020).unwrap();
    let worst_prim = prims.iter().fold((0.0f64, ""), |w, r| if r.worst_rel_error > w.0 { (r.worst_rel_error, r.op) } else { w });
    let mut worst_e2e = 0.0f64;
    for (k, (layout, static_row, linear)) in [(Layout::Dual, true, false), (Layout::Dual, false, true), (Layout::TimeOnly, true, false)]
        .into_iter()
        .enumerate()
    {
        worst_e2e = worst_e2e.max(model_gradcheck(&tiny_config(layout, static_row), linear, 10 + k as u64));
    }
    let elapsed = start.elapsed();
    verdict(
        worst_prim.0 < 1e-4 && worst_e2e < 1e-3 && within(elapsed, 2.0),
        format!(
            "{} primitives, worst rel error {:.2e} ({}); end-to-end L=1 worst {:.2e}; {:.1?}",
            prims.len(),
            worst_prim.0,
            worst_prim.1,
            worst_e2e,
            elapsed
        ),
    )
}

/// Per-cell scan over events with bin membership `[edge(j), edge(j+1))`,
/// the last bin closed at the window end.
fn naive_bins(stay: &PatientStay, n_e: usize, n_t: usize, w: f64, agg: Aggregation) -> (Vec<f64>, Vec<u32>) {
    let edge = |j: usize| if j == n_t { w } else { j as f64 * w / n_t as f64 };
    let mut x = vec![0.0; n_e * n_t];
    let mut m = vec![0u32; n_e * n_t];
    for i in 0..n_e {
        for j in 0..n_t {
            let vals: Vec<f64> = stay
                .events
                .iter()
                .filter(|e| e.event == i)
                .filter(|e| e.time_days >= edge(j) && (e.time_days < edge(j + 1) || (j == n_t - 1 && e.time_days <= w)))
                .map(|e| e.value)
                .collect();
            if vals.is_empty() {
                continue;
            }
            m[i * n_t + j] = vals.len() as u32;
            x[i * n_t + j] = match agg {
                Aggregation::Last => *vals.last().unwrap(),
                Aggregation::Mean => vals.iter().fold(0.0, |a, v| a + v) / vals.len() as f64,
                Aggregation::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                Aggregation::Min => vals.iter().copied().fold(f64::INFINITY, f64::min),
            };
        }
    }
    (x, m)
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut rng = stream(2, "binning-oracle");
    let mut mismatches = 0;
    for s in 0..1000 {
        let n_e = rng.random_range(1..5);
        let n_t = rng.random_range(1..12);
        let w: f64 = rng.random_range(0.3..5.0);
        let events = (0..rng.random_range(0..40))
            .map(|_| {
                // exact edges, the window end and points beyond it all occur
                let t = match rng.random_range(0..4) {
                    0 => rng.random_range(0..=n_t) as f64 * w / n_t as f64,
                    1 => rng.random_range(0.0..w * 1.2),
                    _ => rng.random_range(0.0..w),
                };
                EventTriplet {
                    event: rng.random_range(0..n_e),
                    time_days: t,
                    value: rng.random_range(-10.0..10.0),
                }
            })
            .collect();
        let stay = PatientStay::new(format!("s{s}"), vec![], events, BTreeMap::new());
        for agg in Aggregation::ALL {
            let b = bin_stay(&stay, n_e, n_t, w, agg).unwrap();
            let (x, m) = naive_bins(&stay, n_e, n_t, w, agg);
            if b.x != x || b.m != m {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        mismatches == 0 && within(elapsed, 1.0),
        format!("{mismatches} mismatches over 1000 stays x 4 aggregations; {elapsed:.1?}"),
    )
}

/// Sets a Linear layer to zero weights and constant bias.
fn constant_head(model: &mut DuettModel<f64>, name: &str, bias: f64) {
    for (suffix, value) in [("weight", 0.0), ("bias", bias)] {
        let id = model.store.id(&format!("{name}.{suffix}")).unwrap();
        let shape = model.store.get(id).shape().to_vec();
        model.store.set(id, Tensor::full(shape, value)).unwrap();
    }
}

fn single_cell_loss(x: f64, m: u32, value: f64, logit: f64) -> duett_core::ssl::SslLossReport {
    let mut cfg = ModelConfig::new(1, 1, 0);
    cfg.d = 2;
    cfg.n_heads = 1;
    let mut model = DuettModel::<f64>::new(&cfg, 0).unwrap();
    constant_head(&mut model, "ssl.event_value", value);
    constant_head(&mut model, "ssl.event_presence", logit);
    let batch = Batch {
        size: 1,
        n_e: 1,
        n_t: 1,
        n_static: 0,
        n_labels: 0,
        x: vec![x],
        m: vec![m],
        statics: vec![],
        times: vec![1.0, 1.0],
        labels: vec![],
    };
    let spec = MaskSpec { events: vec![0], bins: vec![] };
    let mut g = Graph::new();
    let z = g.input(Tensor::full(vec![1, cfg.rows(), cfg.cols(), cfg.d], 0.3));
    ssl_loss(&mut g, &model.store, &model.ssl, &cfg, z, &batch, &[spec], LossWeights::default()).unwrap().1
}

/// Plain-number loss from the head weights, per-unit averaged then pooled.
fn oracle_loss(model: &DuettModel<f64>, z: &[f64], batch: &Batch, specs: &[MaskSpec], alpha: f64) -> f64 {
    let cfg = &model.config;
    let (rows, cols, d) = (cfg.rows(), cfg.cols(), cfg.d);
    let linear = |name: &str, input: &[f64]| -> Vec<f64> {
        let w = model.store.get(model.store.id(&format!("{name}.weight")).unwrap());
        let b = model.store.get(model.store.id(&format!("{name}.bias")).unwrap());
        let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
        (0..n_out)
            .map(|o| b.data()[o] + (0..n_in).map(|k| input[k] * w.data()[k * n_out + o]).sum::<f64>())
            .collect()
    };
    let zat = |b: usize, i: usize, j: usize, c: usize| z[((b * rows + i) * cols + j) * d + c];
    let mut unit_losses = Vec::new();
    for (b, spec) in specs.iter().enumerate() {
        for &i in &spec.events {
            let input: Vec<f64> = (0..cols).flat_map(|j| (0..d).map(move |c| (j, c))).map(|(j, c)| zat(b, i, j, c)).collect();
            let (v, p) = (linear("ssl.event_value", &input), linear("ssl.event_presence", &input));
            let cells: Vec<f64> = (0..cfg.n_t)
                .map(|j| {
                    let k = (b * cfg.n_e + i) * cfg.n_t + j;
                    let (lv, lp) = cell_loss(v[j], p[j], batch.x[k], batch.m[k], alpha);
                    lv + lp
                })
                .collect();
            unit_losses.push(cells.iter().sum::<f64>() / cells.len() as f64);
        }
        for &j in &spec.bins {
            let input: Vec<f64> = (0..rows).flat_map(|i| (0..d).map(move |c| (i, c))).map(|(i, c)| zat(b, i, j, c)).collect();
            let (v, p) = (linear("ssl.time_value", &input), linear("ssl.time_presence", &input));
            let cells: Vec<f64> = (0..cfg.n_e)
                .map(|i| {
                    let k = (b * cfg.n_e + i) * cfg.n_t + j;
                    let (lv, lp) = cell_loss(v[i], p[i], batch.x[k], batch.m[k], alpha);
                    lv + lp
                })
                .collect();
            unit_losses.push(cells.iter().sum::<f64>() / cells.len() as f64);
        }
    }
    unit_losses.iter().sum::<f64>() / unit_losses.len() as f64
}

// the hand case states its expected total to four places
#[allow(clippy::approx_constant)]
fn criterion_3() -> Verdict {
    let mut notes = Vec::new();
    let a = single_cell_loss(0.0, 0, 0.7, 0.0);
    let case_a = a.value.abs() < 1e-6 && (a.presence - std::f64::consts::LN_2).abs() < 1e-6 && (a.total - 0.6931).abs() < 1e-4;
    let b = single_cell_loss(1.5, 2, 1.0, 40.0);
    let case_b = (b.value - 0.25).abs() < 1e-6 && b.presence.abs() < 1e-6 && (b.total - 0.25).abs() < 1e-6;
    let c = single_cell_loss(1.5, 2, 1.5, 40.0);
    let case_c = c.total.abs() < 1e-6;
    notes.push(format!("hand cases {case_a}/{case_b}/{case_c}"));

    let mut rng = stream(3, "decomposition");
    let (mut worst_split, mut worst_oracle) = (0.0f64, 0.0f64);
    for k in 0..100 {
        let mut cfg = tiny_config(Layout::Dual, rng.random_bool(0.5));
        cfg.n_e = rng.random_range(1..4);
        cfg.n_t = rng.random_range(1..5);
        let model = DuettModel::<f64>::new(&cfg, k).unwrap();
        let b = rng.random_range(1..4);
        let batch = random_batch(&cfg, b, &mut rng);
        let specs: Vec<MaskSpec> = (0..b)
            .map(|_| {
                let k_e = rng.random_range(0..=cfg.n_e);
                let k_t = rng.random_range(if k_e == 0 { 1 } else { 0 }..=cfg.n_t);
                sample_mask(cfg.n_e, cfg.n_t, k_e, k_t, &mut rng).unwrap()
            })
            .collect();
        let alpha = rng.random_range(0.0..3.0);
        let n = b * cfg.rows() * cfg.cols() * cfg.d;
        let z_data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let z = g.input(Tensor::new(vec![b, cfg.rows(), cfg.cols(), cfg.d], z_data.clone()).unwrap());
        let weights = LossWeights { alpha, value_weight: 1.0 };
        let (_, rep) = ssl_loss(&mut g, &model.store, &model.ssl, &cfg, z, &batch, &specs, weights).unwrap();
        worst_split = worst_split.max((rep.total - (rep.value + alpha * rep.presence)).abs());
        worst_oracle = worst_oracle.max((rep.total - oracle_loss(&model, &z_data, &batch, &specs, alpha)).abs());
    }
    notes.push(format!("100 random instances: |total - (value + alpha*presence)| <= {worst_split:.1e}, oracle gap <= {worst_oracle:.1e}"));
    verdict(case_a && case_b && case_c && worst_split < 1e-9 && worst_oracle < 1e-9, notes.join("; "))
}

fn criterion_4() -> Verdict {
    let start = Instant::now();
    let mut rng = stream(4, "anti-leakage");
    let mut leaks = 0;
    for k in 0..50 {
        let layout = [Layout::Dual, Layout::EventOnly, Layout::TimeOnly][k % 3];
        let mut cfg = tiny_config(layout, k % 2 == 0);
        cfg.n_e = rng.random_range(1..5);
        cfg.n_t = rng.random_range(1..6);
        cfg.n_layers = rng.random_range(1..3);
        let model = DuettModel::<f64>::new(&cfg, k as u64).unwrap();
        let b = rng.random_range(1..4);
        let batch = random_batch(&cfg, b, &mut rng);
        let specs: Vec<MaskSpec> = (0..b)
            .map(|_| {
                let k_e = rng.random_range(0..=cfg.n_e.min(2));
                let k_t = rng.random_range(if k_e == 0 { 1 } else { 0 }..=cfg.n_t.min(2));
                sample_mask(cfg.n_e, cfg.n_t, k_e, k_t, &mut rng).unwrap()
            })
            .collect();
        let mut altered = batch.clone();
        for (bi, spec) in specs.iter().enumerate() {
            for i in 0..cfg.n_e {
                for j in 0..cfg.n_t {
                    if spec.covers(i, j) {
                        let idx = (bi * cfg.n_e + i) * cfg.n_t + j;
                        altered.x[idx] = rng.random_range(-1e6..1e6);
                        altered.m[idx] = rng.random_range(0..50);
                    }
                }
            }
        }
        let run = |batch: &Batch| {
            let mut g = Graph::new();
            let out = model.encoder.forward(&mut g, &model.store, batch, Some(&specs), false, &mut stream(0, "unused")).unwrap();
            g.value(out.z).data().to_vec()
        };
        if run(&batch) != run(&altered) {
            leaks += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(leaks == 0 && within(elapsed, 1.0), format!("{leaks} of 50 pairs changed output; {elapsed:.1?}"))
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let mut rng = stream(5, "shapes");
    let mut failures = Vec::new();
    for k in 0..20 {
        let mut cfg = ModelConfig::new(rng.random_range(1..8), rng.random_range(1..10), rng.random_range(0..3));
        cfg.n_heads = rng.random_range(1..3);
        cfg.d = cfg.n_heads * rng.random_range(1..4);
        cfg.n_layers = rng.random_range(0..4);
        cfg.ffn_hidden = 8;
        let model = DuettModel::<f32>::new(&cfg, k).unwrap();
        let batch = random_batch(&cfg, 2, &mut rng);
        let mut g = Graph::new();
        let out = model.encoder.forward(&mut g, &model.store, &batch, None, false, &mut stream(0, "unused")).unwrap();
        let shape_ok = g.shape(out.z) == g.shape(out.phi);
        let expected_rows = cfg.n_e + 1;
        let dims_ok = out.trace.len() == 2 * cfg.n_layers
            && (0..cfg.n_layers).all(|l| {
                let ev = out.trace.iter().find(|t| t.layer == l && t.axis == Axis::Event);
                let tm = out.trace.iter().find(|t| t.layer == l && t.axis == Axis::Time);
                ev.is_some_and(|t| t.attention == (expected_rows, expected_rows))
                    && tm.is_some_and(|t| t.attention == (cfg.n_t + 1, cfg.n_t + 1))
            });
        if !(shape_ok && dims_ok) {
            failures.push(format!("n_e={} n_t={} d={} L={}", cfg.n_e, cfg.n_t, cfg.d, cfg.n_layers));
        }
    }
    let elapsed = start.elapsed();
    verdict(
        failures.is_empty() && within(elapsed, 1.0),
        format!("20 random configurations, failures {failures:?}; {elapsed:.1?}"),
    )
}

fn brute_roc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// Precision times recall increment at every distinct threshold.
fn brute_ap(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    if pos == 0.0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| labels[i]).count() as f64;
        let recall = tp / pos;
        ap += (recall - prev_recall) * tp / selected.len() as f64;
        prev_recall = recall;
    }
    Some(ap)
}

fn criterion_6() -> Verdict {
    let start = Instant::now();
    let (mut instances, mut worst, mut error_mismatch) = (0usize, 0.0f64, 0usize);
    let mut check = |scores: &[f64], labels: &[bool]| {
        instances += 1;
        match (brute_roc(scores, labels), roc_auc(scores, labels)) {
            (Some(a), Ok(b)) => worst = worst.max((a - b).abs()),
            (None, Err(_)) => {}
            _ => error_mismatch += 1,
        }
        match (brute_ap(scores, labels), pr_auc(scores, labels)) {
            (Some(a), Ok(b)) => worst = worst.max((a - b).abs()),
            (None, Err(_)) => {}
            _ => error_mismatch += 1,
        }
    };
    // every label vector with every score vector over three levels
    let levels = [0.0, 0.5, 1.0];
    for n in 1..=8usize {
        for code in 0..3usize.pow(n as u32) {
            let scores: Vec<f64> = (0..n).map(|i| levels[(code / 3usize.pow(i as u32)) % 3]).collect();
            for mask in 0..(1usize << n) {
                let labels: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                check(&scores, &labels);
            }
        }
    }
    let mut rng = stream(6, "metric-oracle");
    for _ in 0..1000 {
        let n = rng.random_range(9..300);
        let levels = rng.random_range(2..50);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        check(&scores, &labels);
    }
    let elapsed = start.elapsed();
    verdict(
        worst < 1e-9 && error_mismatch == 0 && within(elapsed, 2.0),
        format!("{instances} instances, worst |diff| {worst:.1e}, {error_mismatch} error mismatches; {elapsed:.1?}"),
    )
}

fn criterion_7() -> Verdict {
    let start = Instant::now();
    let suite = reconstruction_suite();
    let mut ordered = 0;
    let mut lines = Vec::new();
    for &seed in &suite.seeds {
        let r = bench_reconstruction(&suite, seed).unwrap();
        ordered += usize::from(r.ordered());
        lines.push(format!(
            "seed {seed}: dual {:.4} event-only {:.4} time-only {:.4} mean-baseline {:.4}",
            r.duett, r.event_only, r.time_only, r.baseline
        ));
    }
    let elapsed = start.elapsed();
    verdict(
        ordered >= 2 && within(elapsed, 15.0),
        format!("ordered on {ordered}/3 seeds [{}]; {elapsed:.1?}", lines.join("; ")),
    )
}

fn criterion_8(runs: &[ClassificationRun], prep: Duration) -> Verdict {
    let start = Instant::now();
    let results: Vec<_> = runs.iter().map(|r| bench_ssl_gain_with(r, 0.1).unwrap()).collect();
    let n = results.len() as f64;
    let pre = results.iter().map(|r| r.pretrained).sum::<f64>() / n;
    let scratch = results.iter().map(|r| r.scratch).sum::<f64>() / n;
    let per_seed: Vec<String> = results
        .iter()
        .map(|r| format!("{}: {:.4} vs {:.4} (base rate {:.2})", r.seed, r.pretrained, r.scratch, r.positive_rate))
        .collect();
    let elapsed = start.elapsed() + prep;
    verdict(
        pre >= scratch && within(elapsed, 10.0),
        format!(
            "10% labels, mean PR-AUC pretrained {pre:.4} vs scratch {scratch:.4} [{}]; {elapsed:.1?} incl. pre-training",
            per_seed.join("; ")
        ),
    )
}

fn criterion_9(runs: &[ClassificationRun]) -> Verdict {
    let start = Instant::now();
    let sweeps: Vec<_> = runs.iter().map(|r| bench_label_sweep(r, &SWEEP_FRACTIONS).unwrap()).collect();
    let avg = average_sweeps(&sweeps);
    let monotone = avg.windows(2).all(|w| w[1].1 >= w[0].1);
    let per_seed: Vec<String> = sweeps
        .iter()
        .zip(runs)
        .map(|(s, r)| format!("{}: {:?}", r.config.seed, s.iter().map(|row| (row.pr_auc * 1e4).round() / 1e4).collect::<Vec<_>>()))
        .collect();
    let elapsed = start.elapsed();
    verdict(
        monotone && within(elapsed, 15.0),
        format!(
            "mean PR-AUC by fraction {:?} [{}]; {elapsed:.1?}",
            avg.iter().map(|(f, p)| (*f, (p * 1e4).round() / 1e4)).collect::<Vec<_>>(),
            per_seed.join("; ")
        ),
    )
}

fn full_run_artifacts() -> Vec<Vec<u8>> {
    let cfg = RunConfig::parse(
        "n_t = 8\nd = 8\nL = 1\nn_heads = 2\nffn_hidden = 16\nepochs = 3\nfinetune_epochs = 3\nbatch_size = 16\n\
         top_k = 2\nwarmup_steps = 5\nfinetune_warmup_steps = 5\nseed = 11\n",
    )
    .unwrap();
    let synth = SynthConfig {
        sparsity: vec![0.6; 6],
        noise_std: 0.2,
        extra_events: 0.5,
        jitter_std: 0.1,
        ..SynthConfig::basic(6, 8, 150)
    };
    let stays = generate_synthetic(&synth, 11).unwrap();
    let (train, val, test) = split(&stays, [0.6, 0.2, 0.2], 11).unwrap();
    let vocab = synth.vocabulary();
    let pre = run_pretrain::<f32>(&cfg, &vocab, &train, &val).unwrap();
    let tasks = resolve_tasks(&cfg, &train).unwrap();
    let norm = pre.meta.norm.clone().unwrap();
    let ex = |s: &[PatientStay]| to_examples(s, &norm, vocab.len(), &cfg, &tasks).unwrap();
    let (model, _) = run_finetune(&cfg, &pre.model, &ex(&train), &ex(&val), &tasks, false).unwrap();
    let report = evaluate(&model, &ex(&test)).unwrap();
    let mut out = vec![Vec::new(), Vec::new(), Vec::new()];
    save(&pre.model, &pre.meta, &mut out[0]).unwrap();
    save(&model, &pre.meta, &mut out[1]).unwrap();
    report.write_csv(&mut out[2]).unwrap();
    out
}

fn criterion_10() -> Verdict {
    let start = Instant::now();
    let a = full_run_artifacts();
    let b = full_run_artifacts();
    let same: Vec<bool> = a.iter().zip(&b).map(|(x, y)| x == y).collect();
    verdict(
        same.iter().all(|&s| s),
        format!(
            "pretrained checkpoint {}, fine-tuned checkpoint {}, report {} ({} bytes); {:.1?}",
            same[0],
            same[1],
            same[2],
            a[1].len(),
            start.elapsed()
        ),
    )
}

fn criterion_11() -> Verdict {
    let t = fit_type(&[1.0, 2.0, 3.0, 4.0, 100.0]);
    let hand = t.median == 3.0 && t.mad == 1.0 && t.clip == Some((0.0, 6.0));
    let synth = SynthConfig {
        sparsity: vec![0.5; 8],
        noise_std: 0.5,
        extra_events: 1.0,
        jitter_std: 0.3,
        ..SynthConfig::basic(8, 16, 600)
    };
    let stays = generate_synthetic(&synth, 12).unwrap();
    let (train, _, _) = split(&stays, [0.7, 0.15, 0.15], 12).unwrap();
    let stats = fit_norm(&train, 8, true).unwrap();
    let normalized: Vec<PatientStay> = train.iter().map(|s| apply_norm(s, &stats)).collect();
    let (mut worst_mean, mut worst_std, mut checked) = (0.0f64, 0.0f64, 0);
    for i in 0..8 {
        let vals: Vec<f64> = normalized.iter().flat_map(|s| s.events.iter().filter(|e| e.event == i).map(|e| e.value)).collect();
        let mut distinct = vals.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() < 2 {
            continue;
        }
        checked += 1;
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        worst_mean = worst_mean.max(mean.abs());
        worst_std = worst_std.max((std - 1.0).abs());
    }
    verdict(
        hand && checked == 8 && worst_mean <= 1e-6 && worst_std <= 1e-3,
        format!(
            "[1,2,3,4,100] -> median {}, MAD {}, bounds {:?}; {checked} types: max |mean| {worst_mean:.1e}, max |std-1| {worst_std:.1e}",
            t.median, t.mad, t.clip
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let total = Instant::now();
    let mut verdicts: Vec<(usize, Verdict)> = Vec::new();
    let mut report = |n: usize, v: Verdict| {
        println!("criterion {n:>2}: {} {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        verdicts.push((n, v));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    report(5, criterion_5());
    report(6, criterion_6());
    report(10, criterion_10());
    report(11, criterion_11());
    report(7, criterion_7());
    let prep = Instant::now();
    let suite = classification_suite();
    let runs: Vec<ClassificationRun> = suite.seeds.iter().map(|&s| prepare_classification(&suite, s).unwrap()).collect();
    report(8, criterion_8(&runs, prep.elapsed()));
    report(9, criterion_9(&runs));
    println!("acceptance suite finished in {:.1?}", total.elapsed());
    let failed: Vec<usize> = verdicts.iter().filter(|(_, v)| !v.passed).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
