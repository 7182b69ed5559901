//! Datasets: table ingestion, train-split standardization, splits and the
//! synthetic generators used by the experiments.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Inputs and targets, one row per observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array2<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::shape(format!(
                "{} input rows but {} target rows",
                x.nrows(),
                y.nrows()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), rows),
            y: self.y.select(Axis(0), rows),
        }
    }
}

/// How a delimiter-separated table is read.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TableFormat {
    /// Skip the first non-empty line.
    pub header: bool,
}

/// Parses a numeric table whose cells are separated by commas or whitespace.
/// The last column is the target.
pub fn parse_table(text: &str, format: &TableFormat) -> Result<Dataset> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut skipped_header = !format.header;
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !skipped_header {
            skipped_header = true;
            continue;
        }
        let cells: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|c| !c.is_empty())
            .collect();
        let mut row = Vec::with_capacity(cells.len());
        for (col, cell) in cells.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Data {
                row: line_no + 1,
                column: col + 1,
                message: format!("not a number: {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Data {
                    row: line_no + 1,
                    column: col + 1,
                    message: "missing or non-finite value".into(),
                });
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Data {
                    row: line_no + 1,
                    column: row.len(),
                    message: format!("expected {} columns", first.len()),
                });
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols < 2 {
        return Err(Error::invalid("table needs at least one row and two columns"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let all = Array2::from_shape_vec((flat.len() / ncols, ncols), flat)
        .map_err(|e| Error::shape(e.to_string()))?;
    let x = all.slice(ndarray::s![.., ..ncols - 1]).to_owned();
    let y = all.slice(ndarray::s![.., ncols - 1..]).to_owned();
    Dataset::new(x, y)
}

pub fn read_table(path: &Path, format: &TableFormat) -> Result<Dataset> {
    parse_table(&std::fs::read_to_string(path)?, format)
}

/// Per-column affine maps fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    /// Input columns kept (constant ones are dropped).
    pub kept_columns: Vec<usize>,
    pub x_mean: Array1<f64>,
    pub x_std: Array1<f64>,
    pub y_mean: Array1<f64>,
    pub y_std: Array1<f64>,
}

fn column_stats(a: ArrayView1<f64>) -> (f64, f64) {
    let n = a.len() as f64;
    let mean = a.sum() / n;
    let var = a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.len() < 2 {
            return Err(Error::invalid("standardization needs at least two training rows"));
        }
        let mut kept = Vec::new();
        let (mut xm, mut xs) = (Vec::new(), Vec::new());
        for (j, col) in train.x.axis_iter(Axis(1)).enumerate() {
            let (m, s) = column_stats(col);
            if s > 0.0 {
                kept.push(j);
                xm.push(m);
                xs.push(s);
            }
        }
        let (mut ym, mut ys) = (Vec::new(), Vec::new());
        for col in train.y.axis_iter(Axis(1)) {
            let (m, s) = column_stats(col);
            if s <= 0.0 {
                return Err(Error::invalid("target is constant on the training split"));
            }
            ym.push(m);
            ys.push(s);
        }
        Ok(Self {
            kept_columns: kept,
            x_mean: xm.into(),
            x_std: xs.into(),
            y_mean: ym.into(),
            y_std: ys.into(),
        })
    }

    pub fn dropped_columns(&self, input_dim: usize) -> Vec<usize> {
        (0..input_dim).filter(|j| !self.kept_columns.contains(j)).collect()
    }

    pub fn transform(&self, d: &Dataset) -> Dataset {
        let x = d.x.select(Axis(1), &self.kept_columns);
        Dataset {
            x: (&x - &self.x_mean) / &self.x_std,
            y: (&d.y - &self.y_mean) / &self.y_std,
        }
    }

    pub fn transform_x(&self, x: &Array2<f64>) -> Array2<f64> {
        (&x.select(Axis(1), &self.kept_columns) - &self.x_mean) / &self.x_std
    }

    pub fn inverse_y(&self, y: &Array2<f64>) -> Array2<f64> {
        y * &self.y_std + &self.y_mean
    }

    /// Standardized-unit standard deviations back to target units.
    pub fn inverse_y_scale(&self, s: &Array2<f64>) -> Array2<f64> {
        s * &self.y_std
    }
}

/// Train/test split protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitProtocol {
    RandomFraction { train: f64 },
    FixedIndices { test: Vec<usize> },
}

/// Row indices `(train, test)`.
pub fn split_indices(n: usize, protocol: &SplitProtocol, rng: &mut impl Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    match protocol {
        SplitProtocol::RandomFraction { train } => {
            if !(*train > 0.0 && *train < 1.0) {
                return Err(Error::Config(format!("train fraction must be in (0, 1), got {train}")));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            let n_train = ((n as f64) * train).round() as usize;
            let n_train = n_train.clamp(1, n.saturating_sub(1));
            let test = idx.split_off(n_train);
            Ok((idx, test))
        }
        SplitProtocol::FixedIndices { test } => {
            if test.iter().any(|i| *i >= n) {
                return Err(Error::Config("test index out of range".into()));
            }
            let train = (0..n).filter(|i| !test.contains(i)).collect();
            Ok((train, test.clone()))
        }
    }
}

/// `y = sin(x) + ε`, `x ~ U(low, high)`, `ε ~ N(0, noise_std²)`.
pub fn toy_sine(n: usize, interval: (f64, f64), noise_std: f64, rng: &mut impl Rng) -> Dataset {
    let x = Array2::from_shape_fn((n, 1), |_| rng.random_range(interval.0..interval.1));
    let y = Array2::from_shape_fn((n, 1), |(i, _)| {
        let eps: f64 = StandardNormal.sample(rng);
        x[[i, 0]].sin() + noise_std * eps
    });
    Dataset { x, y }
}

/// A one-hidden-layer tanh network with `active_units` units and linear
/// output, plus Gaussian noise: the ground truth for pruning experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Teacher {
    /// `(input_dim + 1) × active_units`.
    pub hidden: Array2<f64>,
    /// `(active_units + 1) × 1`.
    pub output: Array2<f64>,
    pub noise_std: f64,
}

impl Teacher {
    pub fn random(input_dim: usize, active_units: usize, noise_std: f64, rng: &mut impl Rng) -> Self {
        let hidden = Array2::from_shape_fn((input_dim + 1, active_units), |_| {
            let v: f64 = StandardNormal.sample(rng);
            1.5 * v
        });
        let output = Array2::from_shape_fn((active_units + 1, 1), |(i, _)| {
            if i == active_units {
                0.0
            } else {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * rng.random_range(1.0..2.0)
            }
        });
        Self {
            hidden,
            output,
            noise_std,
        }
    }

    pub fn mean(&self, x: &Array2<f64>) -> Array2<f64> {
        crate::model::forward_batch(
            crate::model::Nonlinearity::Tanh,
            &[self.hidden.clone(), self.output.clone()],
            x.view(),
        )
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Dataset {
        let d = self.hidden.nrows() - 1;
        let x = Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng));
        let mut y = self.mean(&x);
        y.mapv_inplace(|v| {
            let eps: f64 = StandardNormal.sample(rng);
            v + self.noise_std * eps
        });
        Dataset { x, y }
    }
}
