//! AboveThreshold over a stream of sensitivity-bounded queries.
//!
//! The threshold is perturbed once, each query is perturbed independently,
//! and the mechanism halts at the first query whose noisy value reaches the
//! noisy threshold. The first query has index 1; callers that index their
//! candidates differently remap the halting index themselves.
//!
//! With Gumbel noise and equal budgets the halting distribution has a closed
//! form ([`gumbel_outcome_pmf`]), and the mechanism coincides in distribution
//! with an iterated exponential mechanism ([`run_iterative_em`]).

use serde::{Deserialize, Serialize};

use crate::error::{require_positive, DpError, Result};
use crate::logspace::log_add_exp;
use crate::noise::{NoiseKind, NoiseSpec, RandomSource};

/// Default cap on the number of queries before reporting exhaustion.
pub const DEFAULT_MAX_QUERIES: usize = 200_000;

/// A lazily evaluated sequence of real-valued queries `f_1(x), f_2(x), ...`.
pub trait QueryStream {
    /// Bound on `|f_i(x) - f_i(x')|` over neighboring datasets.
    fn sensitivity(&self) -> f64;

    /// Whether neighbors move every query in the same direction.
    fn is_monotonic(&self) -> bool {
        false
    }

    /// Hard cap on how many queries a run may consume.
    fn max_queries(&self) -> usize {
        DEFAULT_MAX_QUERIES
    }

    /// Value of the next query, or `None` once a finite stream is used up.
    fn next_query(&mut self) -> Option<f64>;
}

/// A finite stream backed by precomputed query values.
#[derive(Clone, Debug)]
pub struct SliceStream<'a> {
    values: &'a [f64],
    pos: usize,
    sensitivity: f64,
    monotonic: bool,
}

impl<'a> SliceStream<'a> {
    pub fn new(values: &'a [f64], sensitivity: f64) -> Self {
        Self {
            values,
            pos: 0,
            sensitivity,
            monotonic: false,
        }
    }

    pub fn monotonic(mut self, flag: bool) -> Self {
        self.monotonic = flag;
        self
    }
}

impl QueryStream for SliceStream<'_> {
    fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    fn is_monotonic(&self) -> bool {
        self.monotonic
    }

    fn max_queries(&self) -> usize {
        self.values.len()
    }

    fn next_query(&mut self) -> Option<f64> {
        let v = self.values.get(self.pos).copied();
        self.pos += 1;
        v
    }
}

/// Result of one AboveThreshold run: `⊥^{k-1} ⊤`, or no halt within the cap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvtOutcome {
    Halted(usize),
    Exhausted { queries: usize },
}

impl SvtOutcome {
    pub fn halt_index(&self) -> Option<usize> {
        match *self {
            SvtOutcome::Halted(k) => Some(k),
            SvtOutcome::Exhausted { .. } => None,
        }
    }

    pub fn is_exhausted(&self) -> bool {
        matches!(self, SvtOutcome::Exhausted { .. })
    }

    /// Number of queries the run consumed.
    pub fn queries(&self) -> usize {
        match *self {
            SvtOutcome::Halted(k) => k,
            SvtOutcome::Exhausted { queries } => queries,
        }
    }
}

/// Budgets and threshold for one AboveThreshold call.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvtConfig {
    eps1: f64,
    eps2: f64,
    noise: NoiseKind,
    threshold: f64,
}

impl SvtConfig {
    pub fn new(eps1: f64, eps2: f64, noise: NoiseKind, threshold: f64) -> Result<Self> {
        require_positive("eps1", eps1)?;
        require_positive("eps2", eps2)?;
        if !threshold.is_finite() {
            return Err(crate::error::invalid("threshold", "must be finite"));
        }
        if noise == NoiseKind::Gumbel && eps1 != eps2 {
            return Err(DpError::GumbelBudgetMismatch { eps1, eps2 });
        }
        Ok(Self {
            eps1,
            eps2,
            noise,
            threshold,
        })
    }

    pub fn eps1(&self) -> f64 {
        self.eps1
    }

    pub fn eps2(&self) -> f64 {
        self.eps2
    }

    pub fn noise(&self) -> NoiseKind {
        self.noise
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }
}

/// Run AboveThreshold on `stream`.
///
/// Draws `T̂ = T + Noise(Δ/ε₁)` once, then `ν_i = Noise(Δ/ε₂)` per query, and
/// halts at the first `k` with `f_k + ν_k ≥ T̂`. Stopping at the cap is
/// reported as [`SvtOutcome::Exhausted`].
pub fn run_above_threshold<S: QueryStream + ?Sized>(
    stream: &mut S,
    cfg: &SvtConfig,
    rng: &mut RandomSource,
) -> SvtOutcome {
    let delta = stream.sensitivity();
    debug_assert!(delta > 0.0 && delta.is_finite());
    let threshold_noise = NoiseSpec::new(cfg.noise, delta / cfg.eps1).expect("validated budget");
    let query_noise = NoiseSpec::new(cfg.noise, delta / cfg.eps2).expect("validated budget");

    let noisy_threshold = cfg.threshold + threshold_noise.sample(rng);
    let cap = stream.max_queries();
    for k in 1..=cap {
        let Some(value) = stream.next_query() else {
            return SvtOutcome::Exhausted { queries: k - 1 };
        };
        if value + query_noise.sample(rng) >= noisy_threshold {
            return SvtOutcome::Halted(k);
        }
    }
    SvtOutcome::Exhausted { queries: cap }
}

/// Deterministic comparison without any noise: halts at the first `k` with
/// `f_k ≥ T`. This is the zero-noise limit used by correctness oracles and
/// carries no privacy guarantee.
#[doc(hidden)]
pub fn run_above_threshold_noiseless<S: QueryStream + ?Sized>(
    stream: &mut S,
    threshold: f64,
) -> SvtOutcome {
    let cap = stream.max_queries();
    for k in 1..=cap {
        let Some(value) = stream.next_query() else {
            return SvtOutcome::Exhausted { queries: k - 1 };
        };
        if value >= threshold {
            return SvtOutcome::Halted(k);
        }
    }
    SvtOutcome::Exhausted { queries: cap }
}

/// Log-probabilities of halting at each `k = 1..=K` under Gumbel noise with
/// `ε₁ = ε₂ = eps`, in a single O(K) pass.
pub fn gumbel_outcome_log_pmfs(values: &[f64], threshold: f64, eps: f64, delta: f64) -> Vec<f64> {
    let a = eps / delta;
    let log_t = a * threshold;
    let mut before = log_t;
    values
        .iter()
        .map(|&f| {
            let score = a * f;
            let through = log_add_exp(before, score);
            let lp = score - through + log_t - before;
            before = through;
            lp
        })
        .collect()
}

/// Probability of halting at each `k = 1..=K` under Gumbel noise.
pub fn gumbel_outcome_pmfs(values: &[f64], threshold: f64, eps: f64, delta: f64) -> Vec<f64> {
    gumbel_outcome_log_pmfs(values, threshold, eps, delta)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// Closed-form probability that Gumbel AboveThreshold (`ε₁ = ε₂ = eps`)
/// outputs `⊥^{k-1} ⊤` on the query values `values`.
pub fn gumbel_outcome_pmf(
    values: &[f64],
    threshold: f64,
    eps: f64,
    delta: f64,
    k: usize,
) -> Result<f64> {
    if k == 0 || k > values.len() {
        return Err(DpError::OutcomeOutOfRange {
            k,
            len: values.len(),
        });
    }
    require_positive("eps", eps)?;
    require_positive("delta", delta)?;
    let log_pmf = gumbel_outcome_log_pmfs(&values[..k], threshold, eps, delta)[k - 1];
    Ok(log_pmf.exp())
}

/// Probability that Gumbel AboveThreshold passes every query in `values`.
pub fn gumbel_no_halt_prob(values: &[f64], threshold: f64, eps: f64, delta: f64) -> f64 {
    let a = eps / delta;
    let log_t = a * threshold;
    let total = values.iter().fold(log_t, |acc, &f| log_add_exp(acc, a * f));
    (log_t - total).exp()
}

/// Per-step selection probabilities `p_k` of the iterated exponential
/// mechanism: the chance that candidate `k` wins among `{T, f_1..f_k}` with
/// exponent `eps / (2Δ)`.
pub fn iterative_em_step_probs(values: &[f64], threshold: f64, eps: f64, delta: f64) -> Vec<f64> {
    let a = eps / (2.0 * delta);
    let mut acc = a * threshold;
    values
        .iter()
        .map(|&f| {
            acc = log_add_exp(acc, a * f);
            (a * f - acc).exp()
        })
        .collect()
}

/// Iterated exponential mechanism: at step `i` select among `{0, ..., i}`
/// with scores `T, f_1, ..., f_i` and weights `∝ exp(eps·score / 2Δ)`;
/// halt when index `i` is selected.
pub fn run_iterative_em<S: QueryStream + ?Sized>(
    stream: &mut S,
    threshold: f64,
    eps: f64,
    rng: &mut RandomSource,
) -> SvtOutcome {
    let a = eps / (2.0 * stream.sensitivity());
    let mut log_total = a * threshold;
    let cap = stream.max_queries();
    for k in 1..=cap {
        let Some(value) = stream.next_query() else {
            return SvtOutcome::Exhausted { queries: k - 1 };
        };
        let score = a * value;
        log_total = log_add_exp(log_total, score);
        // Only whether the newest index wins affects the output, so the
        // categorical draw reduces to a Bernoulli on its probability.
        if rng.open_unit() < (score - log_total).exp() {
            return SvtOutcome::Halted(k);
        }
    }
    SvtOutcome::Exhausted { queries: cap }
}

/// Ensure `eps` and `delta` are usable for the closed-form helpers.
pub fn validate_gumbel_params(eps: f64, delta: f64) -> Result<()> {
    require_positive("eps", eps)?;
    require_positive("delta", delta)
}
