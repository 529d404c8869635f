//! Numerical checks of the drift, decomposition and error-dynamics results,
//! plus sample-quality metrics.
//!
//! Every experiment returns a [`CheckReport`]: the measured records (one CSV
//! row each) and the assertions evaluated on them.

mod decomposition;
mod drift;
mod dynamics;
mod quality;

use std::path::Path;

pub use decomposition::{appendix_identity_check, theorem2_check};
pub use drift::{drift_experiment, theorem1_check};
pub use dynamics::{accumulation_experiment, theorem3_check, Theorem3Point};
pub use quality::{min_cost_assignment, mmd_rbf, sample_quality, wasserstein2, SampleQuality, EXACT_LIMIT};

use crate::error::Result;
use crate::io::{write_csv, CsvMeta};

/// One measured value.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsRecord {
    pub experiment: String,
    pub sweep_value: f64,
    pub value: f64,
    /// Monte Carlo standard error; `None` for deterministic values.
    pub std_err: Option<f64>,
}

impl DiagnosticsRecord {
    pub fn exact(experiment: &str, sweep_value: f64, value: f64) -> Self {
        Self { experiment: experiment.to_string(), sweep_value, value, std_err: None }
    }

    pub fn estimate(experiment: &str, sweep_value: f64, stat: MeanEstimate) -> Self {
        Self { experiment: experiment.to_string(), sweep_value, value: stat.mean, std_err: Some(stat.std_err) }
    }
}

/// A named pass/fail outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Assertion {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }

    pub fn within_band(name: impl Into<String>, diff: f64, std_err: f64, k: f64) -> Self {
        let passed = diff.abs() <= k * std_err;
        Self::new(name, passed, format!("|{diff:.3e}| vs {k}·SE = {:.3e}", k * std_err))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub records: Vec<DiagnosticsRecord>,
    pub assertions: Vec<Assertion>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Assertion> {
        self.assertions.iter().filter(|a| !a.passed)
    }

    pub fn values(&self, experiment: &str) -> Vec<&DiagnosticsRecord> {
        self.records.iter().filter(|r| r.experiment == experiment).collect()
    }

    pub fn extend(&mut self, other: CheckReport) {
        self.records.extend(other.records);
        self.assertions.extend(other.assertions);
    }
}

pub const CSV_HEADER: [&str; 4] = ["experiment", "sweep_value", "value", "std_err"];

/// Writes the records as `(experiment, sweep_value, value, std_err)`; an
/// exact value has an empty `std_err` cell.
pub fn write_records(path: &Path, records: &[DiagnosticsRecord], meta: &CsvMeta) -> Result<()> {
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.experiment.clone(),
                r.sweep_value.to_string(),
                r.value.to_string(),
                r.std_err.map(|s| s.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(path, &CSV_HEADER, &rows, meta)
}

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl MeanEstimate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std_err: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Self { mean, std_err: (var / n as f64).sqrt(), n }
    }
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// `grid` uniformly spaced points on `[lo, hi]`.
pub fn uniform_grid(lo: f64, hi: f64, grid: usize) -> Vec<f64> {
    if grid == 1 {
        return vec![lo];
    }
    (0..grid).map(|i| if i + 1 == grid { hi } else { lo + (hi - lo) * i as f64 / (grid - 1) as f64 }).collect()
}

/// Rows per network call in the Monte Carlo loops.
pub(crate) const CHUNK: usize = 4096;
