//! Dataset generation, CSV ingestion and reference quantiles.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, require_unit_interval, DpError, Result};
use crate::noise::RandomSource;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// Uniform on [-5, 5].
    Uniform,
    /// Normal with mean 0 and standard deviation 5.
    Gaussian,
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::Uniform => "uniform",
            SyntheticKind::Gaussian => "gaussian",
        })
    }
}

impl FromStr for SyntheticKind {
    type Err = DpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(SyntheticKind::Uniform),
            "gaussian" | "normal" => Ok(SyntheticKind::Gaussian),
            other => Err(invalid("synthetic", format!("unknown kind `{other}`"))),
        }
    }
}

pub fn generate_synthetic(kind: SyntheticKind, n: usize, rng: &mut RandomSource) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    Ok(match kind {
        SyntheticKind::Uniform => (0..n).map(|_| rng.uniform(-5.0, 5.0)).collect(),
        SyntheticKind::Gaussian => {
            let normal = Normal::new(0.0, 5.0).expect("valid normal");
            (0..n).map(|_| normal.sample(rng)).collect()
        }
    })
}

/// Column values as read, plus the copy handed to mechanisms.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedColumn {
    pub original: Vec<f64>,
    pub perturbed: Vec<f64>,
}

/// Header name, or a zero-based index if no header matches.
fn column_index(headers: &csv::StringRecord, column: &str) -> Result<usize> {
    if let Some(i) = headers.iter().position(|h| h.trim() == column) {
        return Ok(i);
    }
    match column.parse::<usize>() {
        Ok(i) if i < headers.len() => Ok(i),
        _ => Err(DpError::MissingColumn(column.to_string())),
    }
}

/// Read one numeric column (rows are numbered from 1 after the header).
pub fn read_csv_column(path: &Path, column: &str) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let idx = column_index(reader.headers()?, column)?;
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let text = record.get(idx).unwrap_or("").trim();
        let value: f64 = text.parse().map_err(|_| DpError::Parse {
            row: i + 1,
            text: text.to_string(),
        })?;
        if !value.is_finite() {
            return Err(DpError::Parse {
                row: i + 1,
                text: text.to_string(),
            });
        }
        values.push(value);
    }
    if values.is_empty() {
        return Err(DpError::EmptyDataset);
    }
    Ok(values)
}

/// Add independent `N(0, scale²)` noise to every value; scale 0 copies.
pub fn perturb(values: &[f64], scale: f64, rng: &mut RandomSource) -> Result<Vec<f64>> {
    if scale == 0.0 {
        return Ok(values.to_vec());
    }
    let normal = Normal::new(0.0, scale).map_err(|e| invalid("perturb", e.to_string()))?;
    Ok(values.iter().map(|&v| v + normal.sample(rng)).collect())
}

pub fn load_csv(path: &Path, column: &str, perturb_scale: f64, rng: &mut RandomSource) -> Result<LoadedColumn> {
    if !(perturb_scale >= 0.0 && perturb_scale.is_finite()) {
        return Err(invalid("perturb", "must be a finite nonnegative scale"));
    }
    let original = read_csv_column(path, column)?;
    let perturbed = perturb(&original, perturb_scale, rng)?;
    Ok(LoadedColumn { original, perturbed })
}

/// Quantile by linear interpolation between order statistics at rank
/// `q·(n-1)`.
pub fn true_quantile(data: &[f64], q: f64) -> Result<f64> {
    require_unit_interval("q", q)?;
    if data.is_empty() {
        return Err(DpError::EmptyDataset);
    }
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_of_sorted(&sorted, q))
}

pub fn quantile_of_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Positions of `amount` distinct rows drawn uniformly from `len`.
pub fn sample_indices(len: usize, amount: usize, rng: &mut RandomSource) -> Result<Vec<usize>> {
    if amount > len {
        return Err(invalid(
            "sample_size",
            format!("cannot draw {amount} rows from {len} without replacement"),
        ));
    }
    Ok(index::sample(rng, len, amount).into_vec())
}

pub fn is_integer_valued(values: &[f64]) -> bool {
    values.iter().all(|v| v.fract() == 0.0)
}
