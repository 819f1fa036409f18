//! Input embedding: per-cell value/count projection, static encoder, the
//! [REP] and [MASK] tokens, and the continuous time embedding.
//!
//! The assembled tensor has shape `[B, rows, n_t + 1, d]` where `rows` is
//! `n_e + 1` with the static row and `n_e` without it. The last column holds
//! the [REP] token in every row.

use duett_tensor::nn::{normal_init, BatchNorm1d, BatchNormUpdate, Linear};
use duett_tensor::rng::Rng;
use duett_tensor::{Graph, ParamId, ParamKind, ParamStore, Real, Tensor, Var};

use crate::dataset::Batch;
use crate::{Error, Result};

pub const COUNT_BINS: usize = 16;
pub const STATIC_HIDDEN: usize = 128;
pub const EMBED_STD: f64 = 0.02;

/// Counts 0..=14 keep their own bin; 15 and above share the last one.
pub fn count_bin(count: i64) -> Result<usize> {
    if count < 0 {
        return Err(Error::InvalidArgument(format!("negative count {count}")));
    }
    Ok((count as usize).min(COUNT_BINS - 1))
}

fn bin_of(count: u32) -> usize {
    (count as usize).min(COUNT_BINS - 1)
}

/// `n_static → 128 → batch norm → ReLU → d`.
#[derive(Debug, Clone)]
pub struct StaticEncoder {
    pub hidden: Linear,
    pub norm: BatchNorm1d,
    pub out: Linear,
}

impl StaticEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, n_static: usize, d: usize, rng: &mut Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), n_static, STATIC_HIDDEN, rng),
            norm: BatchNorm1d::new(store, &format!("{name}.norm"), STATIC_HIDDEN),
            out: Linear::new(store, &format!("{name}.out"), STATIC_HIDDEN, d, rng),
        }
    }

    /// `statics: [B, n_static] → [B, d]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        statics: Var,
        training: bool,
    ) -> Result<(Var, Option<BatchNormUpdate>)> {
        let h = self.hidden.forward(g, store, statics)?;
        let (h, update) = self.norm.forward(g, store, h, training)?;
        let h = g.relu(h);
        Ok((self.out.forward(g, store, h)?, update))
    }
}

/// Continuous time embedding: `1 → round(sqrt(dim)) → tanh → dim`.
#[derive(Debug, Clone)]
pub struct Cve {
    pub hidden: Linear,
    pub out: Linear,
    pub dim: usize,
}

pub fn cve_hidden(dim: usize) -> usize {
    ((dim as f64).sqrt().round() as usize).max(1)
}

impl Cve {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut Rng) -> Self {
        let h = cve_hidden(dim);
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), 1, h, rng),
            out: Linear::new(store, &format!("{name}.out"), h, dim, rng),
            dim,
        }
    }

    /// One output row per time value, in days.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, times: &[f64]) -> Result<Var> {
        let t = g.input(Tensor::from_f64(vec![times.len(), 1], times)?);
        let h = self.hidden.forward(g, store, t)?;
        let h = g.tanh(h);
        Ok(self.out.forward(g, store, h)?)
    }
}

#[derive(Debug, Clone)]
pub struct InputEmbedding {
    /// `[value, count scalar] → d`.
    pub cell: Linear,
    /// `[COUNT_BINS, 1]` learned scalars.
    pub count_table: ParamId,
    /// Absent when there are no static features; a learned token stands in.
    pub statics: Option<StaticEncoder>,
    pub static_token: Option<ParamId>,
    pub rep: ParamId,
    pub mask: ParamId,
    pub n_e: usize,
    pub n_t: usize,
    pub d: usize,
    pub static_row: bool,
}

/// Output of [`InputEmbedding::assemble`].
pub struct Embedded {
    /// `[B, rows, n_t + 1, d]`.
    pub phi: Var,
    /// `[B, d]`.
    pub static_emb: Var,
    pub bn_updates: Vec<BatchNormUpdate>,
}

impl InputEmbedding {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        n_e: usize,
        n_t: usize,
        n_static: usize,
        d: usize,
        static_row: bool,
        rng: &mut Rng,
    ) -> Self {
        let cell = Linear::new(store, "embed.cell", 2, d, rng);
        let count_table = store.add(
            "embed.count_table",
            normal_init(vec![COUNT_BINS, 1], EMBED_STD, rng),
            ParamKind::Trainable { decay: false },
        );
        let (statics, static_token) = if n_static > 0 {
            (Some(StaticEncoder::new(store, "embed.static", n_static, d, rng)), None)
        } else {
            let id = store.add("embed.static_token", normal_init(vec![d], EMBED_STD, rng), ParamKind::Trainable { decay: false });
            (None, Some(id))
        };
        let rep = store.add("embed.rep", normal_init(vec![d], EMBED_STD, rng), ParamKind::Trainable { decay: false });
        let mask = store.add("embed.mask", normal_init(vec![d], EMBED_STD, rng), ParamKind::Trainable { decay: false });
        Self {
            cell,
            count_table,
            statics,
            static_token,
            rep,
            mask,
            n_e,
            n_t,
            d,
            static_row,
        }
    }

    pub fn rows(&self) -> usize {
        self.n_e + self.static_row as usize
    }

    /// Cell embeddings `[x.len(), d]` for values `x` and counts `m`.
    pub fn embed_cells<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: &[f64], m: &[u32]) -> Result<Var> {
        let n = x.len();
        let xv = g.input(Tensor::from_f64(vec![n, 1], x)?);
        let table = g.param(store, self.count_table);
        let pm = g.gather_rows(table, 1, m.iter().map(|&c| bin_of(c)).collect(), vec![n, 1])?;
        let pair = g.concat_last(xv, pm)?;
        Ok(self.cell.forward(g, store, pair)?)
    }

    /// `[B, d]` static embeddings.
    pub fn embed_static<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        statics: &[f64],
        batch: usize,
        training: bool,
    ) -> Result<(Var, Option<BatchNormUpdate>)> {
        match (&self.statics, self.static_token) {
            (Some(enc), _) => {
                let n_static = statics.len() / batch.max(1);
                let s = g.input(Tensor::from_f64(vec![batch, n_static], statics)?);
                enc.forward(g, store, s, training)
            }
            (None, Some(tok)) => {
                let t = g.param(store, tok);
                Ok((g.gather_rows(t, self.d, vec![0; batch], vec![batch, self.d])?, None))
            }
            (None, None) => unreachable!("static encoder or token is always present"),
        }
    }

    /// Builds the input tensor for a batch.
    pub fn assemble<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, batch: &Batch, training: bool) -> Result<Embedded> {
        if batch.n_e != self.n_e || batch.n_t != self.n_t {
            return Err(Error::Data(format!(
                "batch has {}×{} cells, model expects {}×{}",
                batch.n_e, batch.n_t, self.n_e, self.n_t
            )));
        }
        let (b, n_e, n_t, d) = (batch.size, self.n_e, self.n_t, self.d);
        let cells = self.embed_cells(g, store, &batch.x, &batch.m)?;
        let (static_emb, update) = self.embed_static(g, store, &batch.statics, b, training)?;
        let rep = g.param(store, self.rep);
        let pool = g.concat_rows(&[cells, static_emb, rep], d)?;
        let n_cells = b * n_e * n_t;
        let rep_row = n_cells + b;
        let rows = self.rows();
        let mut index = Vec::with_capacity(b * rows * (n_t + 1));
        for bi in 0..b {
            for i in 0..rows {
                for j in 0..=n_t {
                    index.push(if j == n_t {
                        rep_row
                    } else if i == n_e {
                        n_cells + bi
                    } else {
                        bi * n_e * n_t + i * n_t + j
                    });
                }
            }
        }
        let phi = g.gather_rows(pool, d, index, vec![b, rows, n_t + 1, d])?;
        Ok(Embedded {
            phi,
            static_emb,
            bn_updates: update.into_iter().collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use duett_tensor::rng::stream;

    fn embedding(n_static: usize, static_row: bool) -> (ParamStore<f64>, InputEmbedding) {
        let mut store = ParamStore::new();
        let e = InputEmbedding::new(&mut store, 3, 4, n_static, 2, static_row, &mut stream(1, "init"));
        (store, e)
    }

    fn batch(b: usize, n_static: usize) -> Batch {
        let n = b * 3 * 4;
        Batch {
            size: b,
            n_e: 3,
            n_t: 4,
            n_static,
            n_labels: 0,
            x: (0..n).map(|k| (k as f64 * 0.37).sin()).collect(),
            m: (0..n).map(|k| (k % 3) as u32).collect(),
            statics: (0..b * n_static).map(|k| k as f64 - 1.0).collect(),
            times: (0..b).flat_map(|_| vec![0.5, 1.0, 1.5, 2.0, 2.0]).collect(),
            labels: vec![],
        }
    }

    #[test]
    fn count_bins() {
        assert_eq!(count_bin(0).unwrap(), 0);
        assert_eq!(count_bin(7).unwrap(), 7);
        assert_eq!(count_bin(14).unwrap(), 14);
        assert_eq!(count_bin(15).unwrap(), 15);
        assert_eq!(count_bin(20).unwrap(), 15);
        assert!(count_bin(-1).is_err());
        assert!((0..40).map(|c| count_bin(c).unwrap()).collect::<Vec<_>>().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn zero_weight_cell_projection_returns_bias() {
        let (mut store, e) = embedding(2, true);
        store.set(e.cell.weight, Tensor::zeros(vec![2, 2])).unwrap();
        store.set(e.cell.bias, Tensor::new(vec![2], vec![0.3, -0.7]).unwrap()).unwrap();
        let mut g = Graph::new();
        let v = e.embed_cells(&mut g, &store, &[1.0, -4.0, 9.0], &[0, 3, 40]).unwrap();
        assert_eq!(g.value(v).data(), &[0.3, -0.7, 0.3, -0.7, 0.3, -0.7]);
    }

    #[test]
    fn saturated_counts_embed_identically() {
        let (store, e) = embedding(2, true);
        let mut g = Graph::new();
        let v = e.embed_cells(&mut g, &store, &[1.5, 1.5], &[20, 99]).unwrap();
        let out = g.value(v).data();
        assert_eq!(g.shape(v), &[2, 2]);
        assert_eq!(out[..2], out[2..]);
    }

    #[test]
    fn cell_gradient_reaches_value_and_count_table() {
        let (store, e) = embedding(2, true);
        let mut g = Graph::new();
        let v = e.embed_cells(&mut g, &store, &[0.8], &[2]).unwrap();
        let loss = g.sum(v);
        let grads = g.param_grads(loss).unwrap();
        let table = grads.iter().find(|(id, _)| *id == e.count_table).unwrap();
        assert!(table.1.data()[2] != 0.0);
        let w = grads.iter().find(|(id, _)| *id == e.cell.weight).unwrap();
        assert!(w.1.data()[0] != 0.0);
    }

    #[test]
    fn assembled_layout() {
        let (store, e) = embedding(2, true);
        let mut g = Graph::new();
        let out = e.assemble(&mut g, &store, &batch(2, 2), false).unwrap();
        assert_eq!(g.shape(out.phi), &[2, 4, 5, 2]);
        let phi = g.value(out.phi).data().to_vec();
        let cell = |b: usize, i: usize, j: usize| &phi[((b * 4 + i) * 5 + j) * 2..((b * 4 + i) * 5 + j) * 2 + 2];
        let rep = store.get(e.rep).data();
        let mask = store.get(e.mask).data();
        for b in 0..2 {
            for j in 1..4 {
                assert_eq!(cell(b, 3, j), cell(b, 3, 0));
            }
            for i in 0..4 {
                assert_eq!(cell(b, i, 4), rep);
                for j in 0..5 {
                    assert_ne!(cell(b, i, j), mask);
                }
            }
        }
    }

    #[test]
    fn without_static_row_there_are_n_e_rows() {
        let (store, e) = embedding(0, false);
        let mut g = Graph::new();
        let out = e.assemble(&mut g, &store, &batch(3, 0), true).unwrap();
        assert_eq!(g.shape(out.phi), &[3, 3, 5, 2]);
        assert_eq!(g.shape(out.static_emb), &[3, 2]);
    }

    #[test]
    fn static_batch_statistics_differ_from_eval() {
        let (store, e) = embedding(2, true);
        let s = [0.3, -1.0, 2.0, 0.5];
        let run = |training| {
            let mut g = Graph::new();
            let (v, _) = e.embed_static(&mut g, &store, &s, 2, training).unwrap();
            g.value(v).data().to_vec()
        };
        assert_eq!(run(false), run(false));
        assert_ne!(run(true), run(false));
    }

    #[test]
    fn cve_dims_and_behaviour() {
        assert_eq!(cve_hidden(100), 10);
        assert_eq!(cve_hidden(0), 1);
        let mut store = ParamStore::<f64>::new();
        let cve = Cve::new(&mut store, "cve", 100, &mut stream(4, "init"));
        let mut g = Graph::new();
        let out = cve.forward(&mut g, &store, &[0.25, 0.5]).unwrap();
        assert_eq!(g.shape(out), &[2, 100]);
        let v = g.value(out).data();
        assert!(v[..100].iter().zip(&v[100..]).any(|(a, b)| (a - b).abs() > 1e-9));

        store.set(cve.hidden.weight, Tensor::zeros(vec![1, 10])).unwrap();
        store.set(cve.hidden.bias, Tensor::zeros(vec![10])).unwrap();
        let mut g = Graph::new();
        let out = cve.forward(&mut g, &store, &[0.1, 7.0]).unwrap();
        let bias = store.get(cve.out.bias).data();
        assert_eq!(&g.value(out).data()[..100], bias);
        assert_eq!(&g.value(out).data()[100..], bias);
    }
}
