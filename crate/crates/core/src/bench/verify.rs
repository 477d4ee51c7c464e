//! Named statistical self-checks with fixed seeds and a JSON report.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::accounting::{empirical_dp_check, outcome_counts, DpCheckConfig};
use crate::error::{DpError, Result};
use crate::histogram::LogBucketHistogram;
use crate::noise::{NoiseKind, RandomSource};
use crate::quantile::{noiseless, Dataset, QuantileRequest};
use crate::sparse_vector::{
    gumbel_no_halt_prob, gumbel_outcome_pmfs, iterative_em_step_probs, run_above_threshold, run_iterative_em,
    SliceStream, SvtConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    GumbelClosedForm,
    EmEquivalence,
    DpRatio,
    HistogramOracle,
    NoiselessOracle,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::GumbelClosedForm,
        Suite::EmEquivalence,
        Suite::DpRatio,
        Suite::HistogramOracle,
        Suite::NoiselessOracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::GumbelClosedForm => "gumbel-closed-form",
            Suite::EmEquivalence => "em-equivalence",
            Suite::DpRatio => "dp-ratio",
            Suite::HistogramOracle => "histogram-oracle",
            Suite::NoiselessOracle => "noiseless-oracle",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = DpError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| DpError::UnknownSuite(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    /// Monte Carlo draws per instance.
    pub trials: usize,
    pub seed: u64,
    /// Randomized instances per suite.
    pub instances: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            trials: 200_000,
            seed: 2023,
            instances: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub suite: Suite,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    fn new(suite: Suite, checks: Vec<CheckResult>) -> Self {
        Self {
            suite,
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }
}

pub fn run_verification_suite(name: &str) -> Result<VerificationReport> {
    run_suite(name.parse()?, &VerifyOptions::default())
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<VerificationReport> {
    let checks = match suite {
        Suite::GumbelClosedForm => gumbel_closed_form(opts),
        Suite::EmEquivalence => em_equivalence(opts),
        Suite::DpRatio => dp_ratio(opts)?,
        Suite::HistogramOracle => histogram_oracle(opts)?,
        Suite::NoiselessOracle => noiseless_oracle(opts)?,
    };
    Ok(VerificationReport::new(suite, checks))
}

/// Largest deviation in standard errors between empirical counts and
/// probabilities (the standard error uses the model probability).
pub fn max_z_score(counts: &[u64], probs: &[f64], trials: usize) -> f64 {
    let n = trials as f64;
    counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let se = (p * (1.0 - p) / n).sqrt().max(1.0 / n);
            (c as f64 / n - p).abs() / se
        })
        .fold(0.0, f64::max)
}

/// Largest two-sample deviation in pooled standard errors.
pub fn max_two_sample_z(a: &[u64], b: &[u64], trials: usize) -> f64 {
    let n = trials as f64;
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let p = (x + y) as f64 / (2.0 * n);
            let se = (2.0 * p * (1.0 - p) / n).sqrt().max(1.0 / n);
            (x as f64 - y as f64).abs() / n / se
        })
        .fold(0.0, f64::max)
}

/// Query values in [-3, 3], 1 to 6 of them, and a threshold in [-3, 3].
pub fn random_instance(rng: &mut RandomSource) -> (Vec<f64>, f64) {
    let k = 1 + rng.below(6);
    let values = (0..k).map(|_| rng.uniform(-3.0, 3.0)).collect();
    (values, rng.uniform(-3.0, 3.0))
}

fn gumbel_closed_form(opts: &VerifyOptions) -> Vec<CheckResult> {
    let mut gen = RandomSource::new(opts.seed, 0);
    (0..opts.instances)
        .map(|i| {
            let (values, threshold) = random_instance(&mut gen);
            let k = values.len();
            let mut probs = gumbel_outcome_pmfs(&values, threshold, 1.0, 1.0);
            probs.push(gumbel_no_halt_prob(&values, threshold, 1.0, 1.0));
            let cfg = SvtConfig::new(1.0, 1.0, NoiseKind::Gumbel, threshold).expect("valid");
            let run = |rng: &mut RandomSource| run_above_threshold(&mut SliceStream::new(&values, 1.0), &cfg, rng);
            let counts = outcome_counts(&run, opts.trials, k, opts.seed.wrapping_add(1 + i as u64), 0);
            let z = max_z_score(&counts, &probs, opts.trials);
            CheckResult {
                name: format!("instance {i} (K = {k})"),
                passed: z <= 4.0,
                detail: format!("max deviation {z:.2} standard errors"),
            }
        })
        .collect()
}

fn em_equivalence(opts: &VerifyOptions) -> Vec<CheckResult> {
    let mut gen = RandomSource::new(opts.seed, 1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (values, threshold) = random_instance(&mut gen);
        let eps = gen.uniform(0.1, 3.0);
        let steps = iterative_em_step_probs(&values, threshold, eps, 1.0);
        let closed = gumbel_outcome_pmfs(&values, threshold, eps / 2.0, 1.0);
        let mut survive = 1.0;
        for (p, c) in steps.iter().zip(&closed) {
            worst = worst.max((survive * p - c).abs());
            survive *= 1.0 - p;
        }
    }
    let mut checks = vec![CheckResult {
        name: "product form".into(),
        passed: worst <= 1e-12,
        detail: format!("max |difference| {worst:.3e} over 1000 instances"),
    }];
    for i in 0..opts.instances.min(5) {
        let (values, threshold) = random_instance(&mut gen);
        let eps = 2.0;
        let cfg = SvtConfig::new(eps / 2.0, eps / 2.0, NoiseKind::Gumbel, threshold).expect("valid");
        let em = |rng: &mut RandomSource| run_iterative_em(&mut SliceStream::new(&values, 1.0), threshold, eps, rng);
        let at = |rng: &mut RandomSource| run_above_threshold(&mut SliceStream::new(&values, 1.0), &cfg, rng);
        let seed = opts.seed.wrapping_add(100 + i as u64);
        let a = outcome_counts(&em, opts.trials, values.len(), seed, 0);
        let b = outcome_counts(&at, opts.trials, values.len(), seed, 1);
        let z = max_two_sample_z(&a, &b, opts.trials);
        checks.push(CheckResult {
            name: format!("sampling instance {i}"),
            passed: z <= 4.0,
            detail: format!("max deviation {z:.2} standard errors"),
        });
    }
    checks
}

fn dp_ratio(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    // Swap neighbors that shift every prefix count near the threshold by one.
    let base: Vec<f64> = (0..40).map(|i| i as f64 * 0.5).collect();
    let mut neighbor = base.clone();
    neighbor[0] = 100.0;
    let beta = 1.1;
    let hx = LogBucketHistogram::build(&base, beta, 0.0)?;
    let hxp = LogBucketHistogram::build(&neighbor, beta, 0.0)?;
    let trials = opts.trials.max(DpCheckConfig::MIN_TRIALS);
    let mut checks = Vec::new();
    for noise in [NoiseKind::Exponential, NoiseKind::Laplace] {
        let cfg = SvtConfig::new(0.5, 0.5, noise, 20.0)?;
        let run_x = |rng: &mut RandomSource| run_above_threshold(&mut hx.query_stream(1, 200), &cfg, rng);
        let run_xp = |rng: &mut RandomSource| run_above_threshold(&mut hxp.query_stream(1, 200), &cfg, rng);
        let report = empirical_dp_check(run_x, run_xp, &DpCheckConfig::new(1.0, trials, 60, opts.seed))?;
        checks.push(CheckResult {
            name: format!("{noise} monotonic counts at claimed eps 1"),
            passed: report.passed,
            detail: format!(
                "max log-ratio {:.3}, lower confidence bound {:.3}",
                report.max_log_ratio, report.max_log_ratio_lower
            ),
        });
    }
    Ok(checks)
}

fn histogram_oracle(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let mut gen = RandomSource::new(opts.seed, 2);
    let mut checks = Vec::new();
    for (i, beta) in [1.001, 1.01, 1.1].into_iter().enumerate() {
        let n = 1 + gen.below(10_000);
        let ell = gen.uniform(-50.0, 50.0);
        let values: Vec<f64> = (0..n).map(|_| ell + gen.uniform(0.0, 1000.0)).collect();
        let hist = LogBucketHistogram::build(&values, beta, ell)?;
        let mut mismatches = 0;
        for _ in 0..100 {
            let idx = gen.below(8000) as u64;
            let t = hist.grid().power(idx as usize);
            let direct = values.iter().filter(|&&x| x - ell + 1.0 < t).count() as u64;
            if direct != hist.prefix_count(idx) {
                mismatches += 1;
            }
        }
        checks.push(CheckResult {
            name: format!("instance {i} (n = {n}, beta = {beta})"),
            passed: mismatches == 0,
            detail: format!("{mismatches} of 100 prefix counts differ from a direct scan"),
        });
    }
    Ok(checks)
}

fn noiseless_oracle(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let mut gen = RandomSource::new(opts.seed, 3);
    let mut failures = 0;
    let instances = opts.instances.max(1) * 10;
    for _ in 0..instances {
        let n = 1 + gen.below(2000);
        let beta = [1.001, 1.01, 1.1][gen.below(3)];
        let ell = gen.uniform(-10.0, 10.0);
        let values: Vec<f64> = (0..n).map(|_| ell + gen.uniform(0.0, 100.0)).collect();
        let q = gen.uniform(0.01, 0.99);
        let data = Dataset::with_lower_bound(values.clone(), ell)?;
        let req = QuantileRequest::new(q, 1.0)?.with_beta(beta);
        let est = noiseless::estimate_quantile(&data, &req)?;
        let threshold = q * n as f64;
        let mut power = 1.0;
        let mut k = 0;
        let expected = loop {
            power *= beta;
            k += 1;
            if values.iter().filter(|&&x| x - ell + 1.0 < power).count() as f64 >= threshold {
                break k;
            }
        };
        if est.index != expected {
            failures += 1;
        }
    }
    Ok(vec![CheckResult {
        name: "minimal crossing index".into(),
        passed: failures == 0,
        detail: format!("{failures} of {instances} instances differ from a linear scan"),
    }])
}
