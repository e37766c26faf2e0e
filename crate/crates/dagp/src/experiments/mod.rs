//! Benchmark data generators, evaluation metrics, and experiment
//! pipelines.
//!
//! Three synthetic regression benchmarks exercise the model end to end:
//! a noise-separation task (a smooth signal contaminated with asymmetric
//! uniform outliers), a multimodal task whose mode count changes across
//! the input space, and a data-association task mixing transitions from
//! two differently parameterized cart-pole systems. [`pipeline`] ties
//! generators, training, and metrics together so the command-line runner
//! and the acceptance tests share one code path.

mod cartpole;
mod generators;
mod metrics;
mod pipeline;

pub use cartpole::{cartpole_step, gen_cartpole, CartpoleConfig, CartpoleState};
pub use generators::{
    choicenet_signal, gen_choicenet, gen_semibimodal, semibimodal_branch_value, SemiBimodalConfig,
};
pub use metrics::{assignment_mass, match_components_to_labels, mll, rmse, MllSummary};
pub use pipeline::{
    baseline_gpr, build_model, evaluate_snapshot, run_experiment, CartpoleParams,
    ChoicenetParams, CustomCsvParams, EvaluationReport, ExperimentConfig, ModelParams,
    RunArtifacts, SemiBimodalParams,
};

use std::path::Path;

use crate::error::{Error, Result};
use crate::math::DenseMatrix;

/// A regression data set with optional generator-side ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Inputs, `N x D`.
    pub x: DenseMatrix,
    /// Targets, `N x P`.
    pub y: DenseMatrix,
    /// True generating component per row, when known.
    pub labels: Option<Vec<usize>>,
    /// Noise-free targets per row, when known.
    pub noiseless_y: Option<DenseMatrix>,
}

impl Dataset {
    pub fn new(x: DenseMatrix, y: DenseMatrix) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(Error::LengthMismatch { op: "dataset", left: x.rows(), right: y.rows() });
        }
        Ok(Dataset { x, y, labels: None, noiseless_y: None })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.y.cols()
    }

    fn validate(&self) -> Result<()> {
        if self.x.rows() != self.y.rows() {
            return Err(Error::LengthMismatch {
                op: "dataset",
                left: self.x.rows(),
                right: self.y.rows(),
            });
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.len() {
                return Err(Error::LengthMismatch {
                    op: "dataset labels",
                    left: labels.len(),
                    right: self.len(),
                });
            }
        }
        if let Some(ny) = &self.noiseless_y {
            if ny.shape() != self.y.shape() {
                return Err(Error::dims(
                    "dataset noiseless targets",
                    format!("{:?} vs {:?}", ny.shape(), self.y.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Concatenate two data sets row-wise. Optional fields survive only
    /// when present on both sides.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.input_dim() != other.input_dim() || self.output_dim() != other.output_dim() {
            return Err(Error::dims(
                "dataset concat",
                format!(
                    "({}, {}) vs ({}, {})",
                    self.input_dim(),
                    self.output_dim(),
                    other.input_dim(),
                    other.output_dim()
                ),
            ));
        }
        let n = self.len() + other.len();
        let x = DenseMatrix::from_fn(n, self.input_dim(), |i, j| {
            if i < self.len() { self.x.get(i, j) } else { other.x.get(i - self.len(), j) }
        });
        let y = DenseMatrix::from_fn(n, self.output_dim(), |i, j| {
            if i < self.len() { self.y.get(i, j) } else { other.y.get(i - self.len(), j) }
        });
        let labels = match (&self.labels, &other.labels) {
            (Some(a), Some(b)) => Some(a.iter().chain(b.iter()).copied().collect()),
            _ => None,
        };
        let noiseless_y = match (&self.noiseless_y, &other.noiseless_y) {
            (Some(a), Some(b)) => Some(DenseMatrix::from_fn(n, self.output_dim(), |i, j| {
                if i < self.len() { a.get(i, j) } else { b.get(i - self.len(), j) }
            })),
            _ => None,
        };
        Ok(Dataset { x, y, labels, noiseless_y })
    }

    /// Write as CSV with headers `x_1..x_D`, `y` (or `y_1..y_P`), and the
    /// optional `label` and `noiseless_y` columns.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let io_err = |e: csv::Error| Error::InvalidConfig(format!("csv write failed: {e}"));
        let tmp = path.with_extension("csv.tmp");
        {
            let mut w = csv::Writer::from_path(&tmp)
                .map_err(|e| Error::InvalidConfig(format!("csv create failed: {e}")))?;
            let mut header: Vec<String> =
                (1..=self.input_dim()).map(|j| format!("x_{j}")).collect();
            header.extend(target_headers("y", self.output_dim()));
            if self.labels.is_some() {
                header.push("label".to_string());
            }
            if self.noiseless_y.is_some() {
                header.extend(target_headers("noiseless_y", self.output_dim()));
            }
            w.write_record(&header).map_err(io_err)?;
            for i in 0..self.len() {
                let mut rec: Vec<String> = Vec::with_capacity(header.len());
                for j in 0..self.input_dim() {
                    rec.push(format_float(self.x.get(i, j)));
                }
                for j in 0..self.output_dim() {
                    rec.push(format_float(self.y.get(i, j)));
                }
                if let Some(labels) = &self.labels {
                    rec.push(labels[i].to_string());
                }
                if let Some(ny) = &self.noiseless_y {
                    for j in 0..self.output_dim() {
                        rec.push(format_float(ny.get(i, j)));
                    }
                }
                w.write_record(&rec).map_err(io_err)?;
            }
            w.flush()
                .map_err(|e| Error::InvalidConfig(format!("csv flush failed: {e}")))?;
        }
        std::fs::rename(&tmp, path)
            .map_err(|e| Error::InvalidConfig(format!("csv rename failed: {e}")))?;
        Ok(())
    }

    /// Read a CSV produced by [`Dataset::save_csv`] (or any file with the
    /// same header scheme).
    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| Error::InvalidConfig(format!("csv open failed: {e}")))?;
        let header = reader
            .headers()
            .map_err(|e| Error::InvalidConfig(format!("csv header read failed: {e}")))?
            .clone();
        let names: Vec<&str> = header.iter().collect();
        let x_cols = indexed_columns(&names, "x")?;
        let y_cols = target_columns(&names, "y")?;
        let noiseless_cols = {
            let cols = target_columns(&names, "noiseless_y").unwrap_or_default();
            if cols.is_empty() { None } else { Some(cols) }
        };
        let label_col = names.iter().position(|n| *n == "label");
        if x_cols.is_empty() || y_cols.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "csv needs x_1.. and y columns, found {names:?}"
            )));
        }
        let mut x_data = Vec::new();
        let mut y_data = Vec::new();
        let mut labels = Vec::new();
        let mut noiseless = Vec::new();
        let mut n = 0usize;
        for record in reader.records() {
            let record =
                record.map_err(|e| Error::InvalidConfig(format!("csv row read failed: {e}")))?;
            let field = |c: usize| -> Result<f64> {
                record
                    .get(c)
                    .ok_or_else(|| Error::InvalidConfig(format!("csv row too short at row {n}")))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidConfig(format!("csv parse failed at row {n}: {e}")))
            };
            for &c in &x_cols {
                x_data.push(field(c)?);
            }
            for &c in &y_cols {
                y_data.push(field(c)?);
            }
            if let Some(c) = label_col {
                let raw = record.get(c).unwrap_or("").trim();
                labels.push(raw.parse::<usize>().map_err(|e| {
                    Error::InvalidConfig(format!("csv label parse failed at row {n}: {e}"))
                })?);
            }
            if let Some(cols) = &noiseless_cols {
                for &c in cols {
                    noiseless.push(field(c)?);
                }
            }
            n += 1;
        }
        let ds = Dataset {
            x: DenseMatrix::from_vec(n, x_cols.len(), x_data)?,
            y: DenseMatrix::from_vec(n, y_cols.len(), y_data)?,
            labels: label_col.map(|_| labels),
            noiseless_y: match noiseless_cols {
                Some(cols) => Some(DenseMatrix::from_vec(n, cols.len(), noiseless)?),
                None => None,
            },
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn target_headers(base: &str, dim: usize) -> Vec<String> {
    if dim == 1 {
        vec![base.to_string()]
    } else {
        (1..=dim).map(|j| format!("{base}_{j}")).collect()
    }
}

/// Column indices for `prefix_1..prefix_D`, ordered by suffix.
fn indexed_columns(names: &[&str], prefix: &str) -> Result<Vec<usize>> {
    let mut found: Vec<(usize, usize)> = Vec::new();
    for (c, name) in names.iter().enumerate() {
        if let Some(suffix) = name.strip_prefix(prefix).and_then(|s| s.strip_prefix('_')) {
            if let Ok(idx) = suffix.parse::<usize>() {
                found.push((idx, c));
            }
        }
    }
    found.sort_unstable();
    for (expect, (idx, _)) in found.iter().enumerate() {
        if *idx != expect + 1 {
            return Err(Error::InvalidConfig(format!(
                "csv columns {prefix}_1..{prefix}_D must be contiguous, found index {idx}"
            )));
        }
    }
    Ok(found.into_iter().map(|(_, c)| c).collect())
}

/// Columns for a target block: either a single bare `base` column or
/// `base_1..base_P`.
fn target_columns(names: &[&str], base: &str) -> Result<Vec<usize>> {
    if let Some(c) = names.iter().position(|n| *n == base) {
        return Ok(vec![c]);
    }
    indexed_columns(names, base)
}

fn format_float(v: f64) -> String {
    // Shortest round-trippable representation.
    let mut buf = ryu_format(v);
    if buf.ends_with(".0") {
        buf.truncate(buf.len() - 2);
    }
    buf
}

fn ryu_format(v: f64) -> String {
    // `{:?}` on f64 produces the shortest string that parses back to the
    // same bits, which keeps CSV round trips exact.
    format!("{v:?}")
}

/// `n` equally spaced values covering `[lo, hi]` inclusively.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}
