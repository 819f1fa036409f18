//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates the forward closure, so it is
//! independent of every backward rule it is used to verify.

use crate::{Graph, Result, Tensor, Var};

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over every entry.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

/// Numeric gradient of a scalar closure by central differences with step `h`.
pub fn numeric_grad<F>(inputs: &[Tensor<f64>], h: f64, f: &F) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            grad.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Analytic gradient of a scalar closure via the tape.
pub fn analytic_grad<F>(inputs: &[Tensor<f64>], f: &F) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.grad(out, &vars)
}

pub fn compare(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> GradCheckReport {
    let (mut diff, mut na, mut nn, mut max_abs, mut entries) = (0.0, 0.0, 0.0, 0.0f64, 0);
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            diff += (x - y) * (x - y);
            na += x * x;
            nn += y * y;
            max_abs = max_abs.max((x - y).abs());
            entries += 1;
        }
    }
    let denom = na.sqrt().max(nn.sqrt()).max(1e-300);
    let rel_error = if diff == 0.0 { 0.0 } else { diff.sqrt() / denom };
    GradCheckReport { rel_error, max_abs_error: max_abs, entries }
}

/// Runs both sides and compares them.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let a = analytic_grad(inputs, &f)?;
    let n = numeric_grad(inputs, h, &f)?;
    Ok(compare(&a, &n))
}

/// Worst relative error seen for one primitive across random instances.
#[derive(Debug, Clone)]
pub struct PrimitiveResult {
    pub op: &'static str,
    pub instances: usize,
    pub worst_rel_error: f64,
}

type Builder = fn(&mut Graph<f64>, &[Var], &Shapes) -> Result<Var>;

/// Small random dimensions shared by one instance.
#[derive(Debug, Clone)]
pub struct Shapes {
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub mask: Vec<bool>,
    pub index: Vec<usize>,
    pub targets: Vec<f64>,
    pub seed: u64,
}

struct Case {
    op: &'static str,
    inputs: fn(&Shapes) -> Vec<Vec<usize>>,
    build: Builder,
}

fn cases() -> Vec<Case> {
    vec![
        Case { op: "add", inputs: |s| vec![vec![s.a, s.b]; 2], build: |g, v, _| g.add(v[0], v[1]) },
        Case { op: "sub", inputs: |s| vec![vec![s.a, s.b]; 2], build: |g, v, _| g.sub(v[0], v[1]) },
        Case { op: "mul", inputs: |s| vec![vec![s.a, s.b]; 2], build: |g, v, _| g.mul(v[0], v[1]) },
        Case {
            op: "add_bcast",
            inputs: |s| vec![vec![s.c, s.a, s.b], vec![s.a, s.b]],
            build: |g, v, _| g.add_bcast(v[0], v[1]),
        },
        Case {
            op: "mul_bcast",
            inputs: |s| vec![vec![s.c, s.a, s.b], vec![s.b]],
            build: |g, v, _| g.mul_bcast(v[0], v[1]),
        },
        Case { op: "scale", inputs: |s| vec![vec![s.a, s.b]], build: |g, v, _| Ok(g.scale(v[0], -1.7)) },
        Case {
            op: "matmul",
            inputs: |s| vec![vec![s.c, s.a, s.b], vec![s.b, s.a]],
            build: |g, v, _| g.matmul(v[0], v[1]),
        },
        Case {
            op: "bmm",
            inputs: |s| vec![vec![s.c, s.a, s.b], vec![s.c, s.b, s.a]],
            build: |g, v, _| g.bmm(v[0], v[1], false),
        },
        Case {
            op: "bmm_trans_b",
            inputs: |s| vec![vec![s.c, s.a, s.b], vec![s.c, s.a + 1, s.b]],
            build: |g, v, _| g.bmm(v[0], v[1], true),
        },
        Case { op: "relu", inputs: |s| vec![vec![s.a, s.b]], build: |g, v, _| Ok(g.relu(v[0])) },
        Case { op: "tanh", inputs: |s| vec![vec![s.a, s.b]], build: |g, v, _| Ok(g.tanh(v[0])) },
        Case { op: "sigmoid", inputs: |s| vec![vec![s.a, s.b]], build: |g, v, _| Ok(g.sigmoid(v[0])) },
        Case { op: "softmax", inputs: |s| vec![vec![s.a, s.b + 1]], build: |g, v, _| g.softmax(v[0]) },
        Case {
            op: "scale_norm",
            inputs: |s| vec![vec![s.a, s.b + 1], vec![1]],
            build: |g, v, _| g.scale_norm(v[0], v[1], 1e-5),
        },
        Case {
            op: "gather_rows",
            inputs: |s| vec![vec![s.a + 1, s.b]],
            build: |g, v, s| {
                let n = s.index.len();
                g.gather_rows(v[0], s.b, s.index.clone(), vec![n, s.b])
            },
        },
        Case {
            op: "reshape",
            inputs: |s| vec![vec![s.a, s.b]],
            build: |g, v, s| g.reshape(v[0], vec![s.b, s.a]),
        },
        Case {
            op: "concat_rows",
            inputs: |s| vec![vec![s.a, s.b], vec![s.c, s.b]],
            build: |g, v, s| g.concat_rows(&[v[0], v[1]], s.b),
        },
        Case {
            op: "concat_last",
            inputs: |s| vec![vec![s.c, s.a], vec![s.c, s.b]],
            build: |g, v, _| g.concat_last(v[0], v[1]),
        },
        Case {
            op: "replace_rows",
            inputs: |s| vec![vec![s.mask.len(), s.b], vec![s.b]],
            build: |g, v, s| g.replace_rows(v[0], v[1], s.mask.clone()),
        },
        Case {
            op: "dropout",
            inputs: |s| vec![vec![s.a, s.b]],
            build: |g, v, s| {
                let mut rng = crate::rng::stream(s.seed, "gradcheck-dropout");
                g.dropout(v[0], 0.3, true, &mut rng)
            },
        },
        Case {
            op: "batch_norm",
            inputs: |s| vec![vec![s.a + 2, s.b]],
            build: |g, v, _| Ok(g.batch_norm(v[0], 1e-5)?.0),
        },
        Case {
            op: "bce_with_logits",
            inputs: |s| vec![vec![s.targets.len()]],
            build: |g, v, s| g.bce_with_logits(v[0], s.targets.clone()),
        },
        Case { op: "sum", inputs: |s| vec![vec![s.a, s.b]], build: |g, v, _| Ok(g.sum(v[0])) },
        Case { op: "mean", inputs: |s| vec![vec![s.a, s.b]], build: |g, v, _| Ok(g.mean(v[0])) },
    ]
}

/// Finite-difference checks of every primitive on `instances` random small
/// problems each. The closure reduces each output with random fixed weights
/// so every output element carries a distinct upstream gradient.
pub fn primitive_suite(instances: usize, seed: u64) -> Result<Vec<PrimitiveResult>> {
    use rand::Rng as _;
    let mut rng = crate::rng::stream(seed, "primitive-suite");
    let mut out = Vec::new();
    for case in cases() {
        let mut worst = 0.0f64;
        for k in 0..instances {
            let a = rng.random_range(1..4);
            let b = rng.random_range(1..4);
            let c = rng.random_range(1..4);
            let mask: Vec<bool> = (0..a + 2).map(|i| i == 0 || rng.random_bool(0.4)).collect();
            let index: Vec<usize> = (0..a + 2).map(|_| rng.random_range(0..a + 1)).collect();
            let targets: Vec<f64> = (0..a * b).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let shapes = Shapes { a, b, c, mask, index, targets, seed: seed ^ k as u64 };
            let inputs: Vec<Tensor<f64>> = (case.inputs)(&shapes)
                .into_iter()
                .map(|shape| {
                    let n: usize = shape.iter().product();
                    let data = (0..n)
                        .map(|_| {
                            // keep away from the relu kink
                            let v: f64 = rng.random_range(0.1..2.0);
                            if rng.random_bool(0.5) { v } else { -v }
                        })
                        .collect();
                    Tensor::new(shape, data)
                })
                .collect::<Result<_>>()?;
            // output weights, drawn after the first forward fixes the output size
            let probe = {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
                let y = (case.build)(&mut g, &vars, &shapes)?;
                g.value(y).numel()
            };
            let weights: Vec<f64> = (0..probe).map(|_| rng.random_range(-1.0..1.0)).collect();
            let build = case.build;
            let report = check(&inputs, 1e-5, |g, vars| {
                let y = build(g, vars, &shapes)?;
                g.weighted_sum(y, weights.clone())
            })?;
            worst = worst.max(report.rel_error);
        }
        out.push(PrimitiveResult { op: case.op, instances, worst_rel_error: worst });
    }
    Ok(out)
}
