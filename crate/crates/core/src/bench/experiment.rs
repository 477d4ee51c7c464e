//! Resampling experiments: per-quantile error and clipped-sum error.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{
    generate_synthetic, is_integer_valued, load_csv, perturb, quantile_of_sorted, sample_indices, SyntheticKind,
};
use crate::aggregates::{dp_sum_with_clip, private_clip, ClipMethod, SumConfig};
use crate::emq::{emq_estimate, BoundedRange};
use crate::error::{invalid, DpError, Result};
use crate::histogram::LogBucketHistogram;
use crate::noise::{NoiseKind, RandomSource};
use crate::quantile::{estimate_quantile_from_histogram, QuantileRequest, DEFAULT_BETA};

/// Stream reserved for generating or perturbing the base dataset; trials
/// use streams `0..outer_trials`.
const DATA_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic { distribution: SyntheticKind, size: usize },
    Csv { path: PathBuf, column: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Uqe,
    Emq,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Uqe => "uqe",
            Method::Emq => "emq",
        })
    }
}

impl FromStr for Method {
    type Err = DpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uqe" => Ok(Method::Uqe),
            "emq" => Ok(Method::Emq),
            other => Err(invalid("method", format!("unknown method `{other}`"))),
        }
    }
}

/// Known datasets with their declared range, perturbation and rounding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetPreset {
    Uniform,
    Gaussian,
    Ratings,
    Pages,
    Hours,
    Ages,
}

impl DatasetPreset {
    pub fn range(self) -> BoundedRange {
        let (a, b) = match self {
            DatasetPreset::Uniform => (-5.0, 5.0),
            DatasetPreset::Gaussian => (-25.0, 25.0),
            DatasetPreset::Ratings => (0.0, 10.0),
            DatasetPreset::Pages => (0.0, 10_000.0),
            DatasetPreset::Hours | DatasetPreset::Ages => (0.0, 100.0),
        };
        BoundedRange::new(a, b).expect("static range")
    }

    pub fn perturb_scale(self) -> f64 {
        match self {
            DatasetPreset::Uniform | DatasetPreset::Gaussian => 0.0,
            DatasetPreset::Ratings => 0.001,
            _ => 0.1,
        }
    }

    pub fn integer_valued(self) -> bool {
        matches!(self, DatasetPreset::Pages | DatasetPreset::Hours | DatasetPreset::Ages)
    }

    pub fn synthetic(self) -> Option<SyntheticKind> {
        match self {
            DatasetPreset::Uniform => Some(SyntheticKind::Uniform),
            DatasetPreset::Gaussian => Some(SyntheticKind::Gaussian),
            _ => None,
        }
    }
}

impl FromStr for DatasetPreset {
    type Err = DpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(DatasetPreset::Uniform),
            "gaussian" | "normal" => Ok(DatasetPreset::Gaussian),
            "ratings" => Ok(DatasetPreset::Ratings),
            "pages" => Ok(DatasetPreset::Pages),
            "hours" => Ok(DatasetPreset::Hours),
            "ages" => Ok(DatasetPreset::Ages),
            other => Err(invalid("dataset", format!("unknown preset `{other}`"))),
        }
    }
}

/// Quantiles 0.05, 0.06, ..., 0.95.
pub fn default_quantile_grid() -> Vec<f64> {
    (5..=95).map(|p| p as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub source: DataSource,
    pub sample_size: usize,
    pub outer_trials: usize,
    /// Laplace draws per resample in the sum experiment.
    pub inner_trials: usize,
    pub quantiles: Vec<f64>,
    pub methods: Vec<Method>,
    pub eps_grid: Vec<f64>,
    pub seed: u64,
    pub perturb: f64,
    /// Declared range for EMQ in the quantile experiment. UQE uses its lower end.
    pub range: Option<BoundedRange>,
    pub round_outputs: bool,
    pub beta: f64,
    pub noise: NoiseKind,
    /// Range for EMQ clipping in the sum experiment.
    pub sum_range: BoundedRange,
    pub uqe_sum_q: f64,
    /// EMQ clipping reports the best of these.
    pub emq_sum_qs: Vec<f64>,
    /// Record wall-clock time per method (makes output nondeterministic).
    pub timings: bool,
}

impl ExperimentSpec {
    pub fn new(source: DataSource) -> Self {
        Self {
            source,
            sample_size: 1000,
            outer_trials: 100,
            inner_trials: 100,
            quantiles: default_quantile_grid(),
            methods: vec![Method::Uqe, Method::Emq],
            eps_grid: vec![1.0],
            seed: 0,
            perturb: 0.0,
            range: None,
            round_outputs: false,
            beta: DEFAULT_BETA,
            noise: NoiseKind::Exponential,
            sum_range: BoundedRange::new(0.0, 10_000.0).expect("static range"),
            uqe_sum_q: 0.99,
            emq_sum_qs: vec![0.95, 0.96, 0.97, 0.98, 0.99],
            timings: false,
        }
    }

    /// Preset defaults; CSV presets need the file and column.
    pub fn from_preset(preset: DatasetPreset, csv: Option<(PathBuf, String)>) -> Result<Self> {
        let source = match (preset.synthetic(), csv) {
            (Some(distribution), None) => DataSource::Synthetic {
                distribution,
                size: 10_000,
            },
            (_, Some((path, column))) => DataSource::Csv { path, column },
            (None, None) => return Err(invalid("input", format!("preset {preset:?} needs a CSV file"))),
        };
        let mut spec = Self::new(source);
        spec.range = Some(preset.range());
        spec.perturb = preset.perturb_scale();
        spec.round_outputs = preset.integer_valued();
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_size == 0 {
            return Err(invalid("sample_size", "must be at least 1"));
        }
        if self.outer_trials == 0 || self.inner_trials == 0 {
            return Err(invalid("trials", "must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(invalid("methods", "at least one method required"));
        }
        if self.eps_grid.iter().any(|&e| !(e > 0.0 && e.is_finite())) || self.eps_grid.is_empty() {
            return Err(invalid("eps_grid", "need positive finite budgets"));
        }
        if !(self.beta > 1.0) {
            return Err(invalid("beta", "must exceed 1"));
        }
        if !(self.perturb >= 0.0 && self.perturb.is_finite()) {
            return Err(invalid("perturb", "must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Base data: values for the truth, and the (perturbed) values for mechanisms.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub original: Vec<f64>,
    pub released: Vec<f64>,
    pub integer_valued: bool,
}

/// Materialize the source, perturb it, and clamp the mechanism copy into
/// `clamp` when given.
pub fn prepare_data(spec: &ExperimentSpec, clamp: Option<&BoundedRange>) -> Result<PreparedData> {
    let mut rng = RandomSource::new(spec.seed, DATA_STREAM);
    let (original, mut released) = match &spec.source {
        DataSource::Synthetic { distribution, size } => {
            let original = generate_synthetic(*distribution, *size, &mut rng)?;
            let released = perturb(&original, spec.perturb, &mut rng)?;
            (original, released)
        }
        DataSource::Csv { path, column } => {
            let col = load_csv(path, column, spec.perturb, &mut rng)?;
            (col.original, col.perturbed)
        }
    };
    if spec.sample_size > original.len() {
        return Err(invalid(
            "sample_size",
            format!("{} exceeds dataset size {}", spec.sample_size, original.len()),
        ));
    }
    if let Some(r) = clamp {
        released.iter_mut().for_each(|v| *v = r.clamp(*v));
    }
    let integer_valued = is_integer_valued(&original);
    Ok(PreparedData {
        original,
        released,
        integer_valued,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment: String,
    pub method: Method,
    pub epsilon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    pub mae: f64,
    /// Standard deviation across outer trials.
    pub std: f64,
    /// MAE divided by UQE's MAE at the same `(ε, q)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalized: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runtime_ms: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

struct TrialSample {
    original: Vec<f64>,
    released: Vec<f64>,
}

fn draw_sample(data: &PreparedData, size: usize, rng: &mut RandomSource) -> Result<TrialSample> {
    let idx = sample_indices(data.original.len(), size, rng)?;
    Ok(TrialSample {
        original: idx.iter().map(|&i| data.original[i]).collect(),
        released: idx.iter().map(|&i| data.released[i]).collect(),
    })
}

/// Per trial: `errors[eps][method][q]` and `millis[eps][method]`.
struct TrialErrors {
    errors: Vec<Vec<Vec<f64>>>,
    millis: Vec<Vec<f64>>,
}

fn quantile_trial(
    spec: &ExperimentSpec,
    data: &PreparedData,
    range: Option<&BoundedRange>,
    lower: f64,
    trial: usize,
) -> Result<TrialErrors> {
    let mut rng = RandomSource::new(spec.seed, trial as u64);
    let sample = draw_sample(data, spec.sample_size, &mut rng)?;
    let mut sorted = sample.original.clone();
    sorted.sort_by(f64::total_cmp);
    let truth: Vec<f64> = spec.quantiles.iter().map(|&q| quantile_of_sorted(&sorted, q)).collect();
    let round = spec.round_outputs && data.integer_valued;
    let finish = |v: f64| if round { v.round() } else { v };

    let mut errors = Vec::with_capacity(spec.eps_grid.len());
    let mut millis = Vec::with_capacity(spec.eps_grid.len());
    for &eps in &spec.eps_grid {
        let mut per_method = Vec::with_capacity(spec.methods.len());
        let mut per_method_ms = Vec::with_capacity(spec.methods.len());
        for method in &spec.methods {
            let start = Instant::now();
            let mut errs = Vec::with_capacity(spec.quantiles.len());
            match method {
                Method::Uqe => {
                    let hist = LogBucketHistogram::build(&sample.released, spec.beta, lower)?;
                    for (&q, &t) in spec.quantiles.iter().zip(&truth) {
                        let req = QuantileRequest::new(q, eps)?.with_beta(spec.beta).with_noise(spec.noise);
                        let est = estimate_quantile_from_histogram(&hist, &req, &mut rng)?;
                        errs.push((finish(est.value) - t).abs());
                    }
                }
                Method::Emq => {
                    let range = range.ok_or_else(|| invalid("range", "EMQ needs a declared range"))?;
                    for (&q, &t) in spec.quantiles.iter().zip(&truth) {
                        let est = emq_estimate(&sample.released, range, q, eps, &mut rng)?;
                        errs.push((finish(est) - t).abs());
                    }
                }
            }
            per_method_ms.push(start.elapsed().as_secs_f64() * 1e3);
            per_method.push(errs);
        }
        errors.push(per_method);
        millis.push(per_method_ms);
    }
    Ok(TrialErrors { errors, millis })
}

/// Mean absolute error per `(ε, method, q)` over resampled subsets.
pub fn run_quantile_experiment(spec: &ExperimentSpec) -> Result<Vec<ResultRecord>> {
    spec.validate()?;
    if spec.quantiles.iter().any(|&q| !(q > 0.0 && q <= 1.0)) {
        return Err(invalid("quantiles", "must lie in (0, 1]"));
    }
    let range = spec.range;
    let lower = match range {
        Some(r) => r.lo(),
        None if !spec.methods.contains(&Method::Uqe) => 0.0,
        None => return Err(DpError::MissingLowerBound),
    };
    let data = prepare_data(spec, range.as_ref())?;
    let trials: Vec<TrialErrors> = (0..spec.outer_trials)
        .into_par_iter()
        .map(|t| quantile_trial(spec, &data, range.as_ref(), lower, t))
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    for (e, &eps) in spec.eps_grid.iter().enumerate() {
        let start = records.len();
        for (m, &method) in spec.methods.iter().enumerate() {
            let runtime = spec
                .timings
                .then(|| trials.iter().map(|t| t.millis[e][m]).sum::<f64>() / spec.quantiles.len() as f64);
            for (j, &q) in spec.quantiles.iter().enumerate() {
                let errs: Vec<f64> = trials.iter().map(|t| t.errors[e][m][j]).collect();
                let (mae, std) = mean_std(&errs);
                records.push(ResultRecord {
                    experiment: "quantile".into(),
                    method,
                    epsilon: eps,
                    q: Some(q),
                    mae,
                    std,
                    normalized: None,
                    runtime_ms: runtime,
                });
            }
        }
        normalize_against_uqe(&mut records[start..]);
    }
    Ok(records)
}

fn normalize_against_uqe(records: &mut [ResultRecord]) {
    let base: Vec<(Option<f64>, f64)> = records
        .iter()
        .filter(|r| r.method == Method::Uqe)
        .map(|r| (r.q, r.mae))
        .collect();
    for r in records.iter_mut() {
        r.normalized = base
            .iter()
            .find(|(q, _)| *q == r.q)
            .and_then(|&(_, m)| if m > 0.0 { Some(r.mae / m) } else { None });
    }
}

/// Per trial: `mae[eps][method][q]` for one resample, and `millis[eps][method]`.
fn sum_trial(spec: &ExperimentSpec, data: &PreparedData, trial: usize) -> Result<TrialErrors> {
    let mut rng = RandomSource::new(spec.seed, trial as u64);
    let sample = draw_sample(data, spec.sample_size, &mut rng)?;
    let truth: f64 = sample.original.iter().sum();
    let mut errors = Vec::new();
    let mut millis = Vec::new();
    for &eps in &spec.eps_grid {
        let mut per_method = Vec::new();
        let mut per_method_ms = Vec::new();
        for method in &spec.methods {
            let start = Instant::now();
            let (qs, clip_method) = match method {
                Method::Uqe => (
                    vec![spec.uqe_sum_q],
                    ClipMethod::Uqe {
                        beta: spec.beta,
                        noise: spec.noise,
                    },
                ),
                Method::Emq => (spec.emq_sum_qs.clone(), ClipMethod::Emq { range: spec.sum_range }),
            };
            let mut maes = Vec::with_capacity(qs.len());
            for q in qs {
                let cfg = SumConfig::new(eps).with_q(q).with_method(clip_method);
                let (clip, _) = private_clip(&sample.released, &cfg, &mut rng)?;
                let mut total = 0.0;
                for _ in 0..spec.inner_trials {
                    total += (dp_sum_with_clip(&sample.released, clip, eps, &mut rng)? - truth).abs();
                }
                maes.push(total / spec.inner_trials as f64);
            }
            per_method_ms.push(start.elapsed().as_secs_f64() * 1e3);
            per_method.push(maes);
        }
        errors.push(per_method);
        millis.push(per_method_ms);
    }
    Ok(TrialErrors { errors, millis })
}

/// Clipped-sum error per `(ε, method)`. EMQ keeps its best clipping quantile.
pub fn run_sum_experiment(spec: &ExperimentSpec) -> Result<Vec<ResultRecord>> {
    spec.validate()?;
    if spec.emq_sum_qs.is_empty() {
        return Err(invalid("emq_sum_qs", "at least one quantile required"));
    }
    let data = prepare_data(spec, Some(&spec.sum_range))?;
    if data.original.iter().any(|&v| v < 0.0) {
        return Err(invalid("data", "sum experiments need nonnegative data"));
    }
    let trials: Vec<TrialErrors> = (0..spec.outer_trials)
        .into_par_iter()
        .map(|t| sum_trial(spec, &data, t))
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    for (e, &eps) in spec.eps_grid.iter().enumerate() {
        let start = records.len();
        for (m, &method) in spec.methods.iter().enumerate() {
            let qs: Vec<f64> = match method {
                Method::Uqe => vec![spec.uqe_sum_q],
                Method::Emq => spec.emq_sum_qs.clone(),
            };
            let best = qs
                .iter()
                .enumerate()
                .map(|(j, &q)| {
                    let per_outer: Vec<f64> = trials.iter().map(|t| t.errors[e][m][j]).collect();
                    let (mae, std) = mean_std(&per_outer);
                    (q, mae, std)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("nonempty quantile list");
            records.push(ResultRecord {
                experiment: "sum".into(),
                method,
                epsilon: eps,
                q: Some(best.0),
                mae: best.1,
                std: best.2,
                normalized: None,
                runtime_ms: spec.timings.then(|| trials.iter().map(|t| t.millis[e][m]).sum()),
            });
        }
        let uqe = records[start..].iter().find(|r| r.method == Method::Uqe).map(|r| r.mae);
        for r in &mut records[start..] {
            r.normalized = uqe.filter(|&m| m > 0.0).map(|m| r.mae / m);
        }
    }
    Ok(records)
}

/// Figure-style table: one row per `q`, one column per method, values
/// normalized by UQE.
pub fn normalized_error_csv(records: &[ResultRecord], eps: f64) -> String {
    let mut methods: Vec<Method> = Vec::new();
    let mut qs: Vec<f64> = Vec::new();
    for r in records.iter().filter(|r| r.experiment == "quantile" && r.epsilon == eps) {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
        if let Some(q) = r.q {
            if !qs.contains(&q) {
                qs.push(q);
            }
        }
    }
    let mut out = String::from("q");
    for m in &methods {
        out.push_str(&format!(",{m}"));
    }
    out.push('\n');
    for q in qs {
        out.push_str(&format!("{q}"));
        for m in &methods {
            let v = records
                .iter()
                .find(|r| r.experiment == "quantile" && r.epsilon == eps && r.method == *m && r.q == Some(q))
                .and_then(|r| r.normalized);
            match v {
                Some(v) => out.push_str(&format!(",{v}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}
