//! Aggregation of irregular events onto a regular grid of equal-width bins.
//!
//! Bin `j` covers `[edge(j), edge(j + 1))` with `edge(j) = j * w / n_t`; the
//! final bin is closed on the right so events exactly at the window end are
//! kept. Events after the window are dropped.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::PatientStay;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Value with the latest timestamp; ties go to the later input event.
    #[default]
    Last,
    Mean,
    Max,
    Min,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [Aggregation::Last, Aggregation::Mean, Aggregation::Max, Aggregation::Min];
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Self::Last),
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            "min" => Ok(Self::Min),
            _ => Err(Error::Config(format!("unknown aggregation {s:?}"))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Last => "last",
            Self::Mean => "mean",
            Self::Max => "max",
            Self::Min => "min",
        })
    }
}

/// Observation window: fixed length, or each stay's own duration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Window {
    Fixed(f64),
    Auto,
}

impl Window {
    /// Window length for `stay`. `Auto` uses the last event time, or one
    /// day for stays whose events all sit at time zero.
    pub fn resolve(&self, stay: &PatientStay) -> f64 {
        match *self {
            Window::Fixed(w) => w,
            Window::Auto => match stay.duration_days() {
                Some(t) if t > 0.0 => t,
                _ => 1.0,
            },
        }
    }
}

impl FromStr for Window {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Window::Auto);
        }
        match s.parse::<f64>() {
            Ok(w) if w.is_finite() && w > 0.0 => Ok(Window::Fixed(w)),
            _ => Err(Error::Config(format!("window_days must be a positive number or \"auto\", got {s:?}"))),
        }
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::Fixed(w) => write!(f, "{w}"),
            Window::Auto => f.write_str("auto"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinnedStay {
    pub n_e: usize,
    pub n_t: usize,
    /// Row-major `n_e × n_t`; zero where unobserved.
    pub x: Vec<f64>,
    pub m: Vec<u32>,
    pub bin_end_days: Vec<f64>,
    pub window_days: f64,
}

impl BinnedStay {
    pub fn value(&self, event: usize, bin: usize) -> f64 {
        self.x[event * self.n_t + bin]
    }

    pub fn count(&self, event: usize, bin: usize) -> u32 {
        self.m[event * self.n_t + bin]
    }

    pub fn total_count(&self) -> u64 {
        self.m.iter().map(|&c| c as u64).sum()
    }

    /// Writes `x` then `m` as CSV blocks, one row per event type.
    pub fn write_csv<W: Write>(&self, mut out: W, names: &[String]) -> Result<()> {
        let header: Vec<String> = self.bin_end_days.iter().map(|t| format!("{t}")).collect();
        for (label, is_count) in [("x", false), ("m", true)] {
            writeln!(out, "{label},{}", header.join(","))?;
            for i in 0..self.n_e {
                let name = names.get(i).map(String::as_str).unwrap_or("?");
                let row: Vec<String> = (0..self.n_t)
                    .map(|j| if is_count { self.count(i, j).to_string() } else { self.value(i, j).to_string() })
                    .collect();
                writeln!(out, "{name},{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

/// Left edge of bin `j`; `edge(n_t)` is the window end.
pub fn bin_edge(j: usize, n_t: usize, window_days: f64) -> f64 {
    if j >= n_t {
        window_days
    } else {
        j as f64 * window_days / n_t as f64
    }
}

/// Bin containing time `t`, or `None` outside `[0, window]`.
pub fn bin_index(t: f64, n_t: usize, window_days: f64) -> Option<usize> {
    if !(0.0..=window_days).contains(&t) {
        return None;
    }
    let mut j = ((t / window_days) * n_t as f64).floor().min((n_t - 1) as f64) as usize;
    // settle rounding so membership is decided by the edges alone
    while j > 0 && t < bin_edge(j, n_t, window_days) {
        j -= 1;
    }
    while j + 1 < n_t && t >= bin_edge(j + 1, n_t, window_days) {
        j += 1;
    }
    Some(j)
}

/// Bin end times in days.
pub fn bin_times(n_t: usize, window_days: f64) -> Vec<f64> {
    (0..n_t).map(|j| bin_edge(j + 1, n_t, window_days)).collect()
}

fn check_grid(n_t: usize, window_days: f64) -> Result<()> {
    if n_t == 0 {
        return Err(Error::InvalidArgument("n_t must be at least 1".into()));
    }
    if !(window_days.is_finite() && window_days > 0.0) {
        return Err(Error::InvalidArgument(format!("window must be positive, got {window_days}")));
    }
    Ok(())
}

pub fn bin_stay(stay: &PatientStay, n_e: usize, n_t: usize, window_days: f64, agg: Aggregation) -> Result<BinnedStay> {
    check_grid(n_t, window_days)?;
    let mut x = vec![0.0; n_e * n_t];
    let mut m = vec![0u32; n_e * n_t];
    for e in &stay.events {
        if e.event >= n_e {
            return Err(Error::Data(format!(
                "stay {}: event index {} outside {n_e} types",
                stay.stay_id, e.event
            )));
        }
        let Some(j) = bin_index(e.time_days, n_t, window_days) else {
            continue;
        };
        let k = e.event * n_t + j;
        let first = m[k] == 0;
        m[k] += 1;
        x[k] = match agg {
            Aggregation::Last => e.value,
            Aggregation::Mean => x[k] + e.value,
            Aggregation::Max if first => e.value,
            Aggregation::Max => x[k].max(e.value),
            Aggregation::Min if first => e.value,
            Aggregation::Min => x[k].min(e.value),
        };
    }
    if agg == Aggregation::Mean {
        for (v, &c) in x.iter_mut().zip(&m) {
            if c > 0 {
                *v /= c as f64;
            }
        }
    }
    Ok(BinnedStay {
        n_e,
        n_t,
        x,
        m,
        bin_end_days: bin_times(n_t, window_days),
        window_days,
    })
}
