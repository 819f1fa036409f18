//! Binned examples and mini-batches.

use crate::binning::{bin_stay, Aggregation, BinnedStay, Window};
use crate::data::PatientStay;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub stay_id: String,
    pub binned: BinnedStay,
    pub statics: Vec<f64>,
    /// One entry per task, in task order.
    pub labels: Vec<f64>,
}

/// Bins each stay and extracts the listed task labels.
pub fn prepare(
    stays: &[PatientStay],
    n_e: usize,
    n_t: usize,
    window: Window,
    agg: Aggregation,
    tasks: &[String],
) -> Result<Vec<Example>> {
    stays
        .iter()
        .map(|s| {
            let labels = tasks
                .iter()
                .map(|t| {
                    s.labels
                        .get(t)
                        .copied()
                        .ok_or_else(|| Error::Data(format!("stay {} has no label {t:?}", s.stay_id)))
                })
                .collect::<Result<Vec<_>>>()?;
            if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
                return Err(Error::Data(format!("stay {}: labels must be 0 or 1", s.stay_id)));
            }
            Ok(Example {
                stay_id: s.stay_id.clone(),
                binned: bin_stay(s, n_e, n_t, window.resolve(s), agg)?,
                statics: s.statics.clone(),
                labels,
            })
        })
        .collect()
}

/// Row-major batch tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub n_e: usize,
    pub n_t: usize,
    pub n_static: usize,
    pub n_labels: usize,
    /// `[B, n_e, n_t]`.
    pub x: Vec<f64>,
    pub m: Vec<u32>,
    /// `[B, n_static]`.
    pub statics: Vec<f64>,
    /// `[B, n_t + 1]`: bin end times, then the window end for the [REP] column.
    pub times: Vec<f64>,
    /// `[B, n_labels]`.
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn new(examples: &[&Example]) -> Result<Self> {
        let first = examples.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (n_e, n_t) = (first.binned.n_e, first.binned.n_t);
        let (n_static, n_labels) = (first.statics.len(), first.labels.len());
        let mut b = Batch {
            size: examples.len(),
            n_e,
            n_t,
            n_static,
            n_labels,
            x: Vec::with_capacity(examples.len() * n_e * n_t),
            m: Vec::with_capacity(examples.len() * n_e * n_t),
            statics: Vec::with_capacity(examples.len() * n_static),
            times: Vec::with_capacity(examples.len() * (n_t + 1)),
            labels: Vec::with_capacity(examples.len() * n_labels),
        };
        for ex in examples {
            if ex.binned.n_e != n_e || ex.binned.n_t != n_t || ex.statics.len() != n_static || ex.labels.len() != n_labels {
                return Err(Error::Data(format!("stay {} does not match the batch dimensions", ex.stay_id)));
            }
            b.x.extend_from_slice(&ex.binned.x);
            b.m.extend_from_slice(&ex.binned.m);
            b.statics.extend_from_slice(&ex.statics);
            b.times.extend_from_slice(&ex.binned.bin_end_days);
            b.times.push(ex.binned.window_days);
            b.labels.extend_from_slice(&ex.labels);
        }
        Ok(b)
    }

    pub fn from_slice(examples: &[Example]) -> Result<Self> {
        Self::new(&examples.iter().collect::<Vec<_>>())
    }

    pub fn label_column(&self, task: usize) -> Vec<f64> {
        (0..self.size).map(|b| self.labels[b * self.n_labels + task]).collect()
    }
}
