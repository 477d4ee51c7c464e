//! Privacy accounting for AboveThreshold configurations.
//!
//! Two views of the same loss are provided: symbolic per-class bounds
//! ([`guarantee_for`]) and the numeric one-sided loss `ε(x, x')` evaluated on
//! explicit query values ([`one_sided_loss`]), which is what the property
//! tests quantify over. [`empirical_dp_check`] estimates halting
//! distributions on a fixed neighbor pair and looks for a statistically
//! significant violation of a claimed `ε`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, require_positive, require_unit_interval, DpError, Result};
use crate::noise::{NoiseKind, RandomSource};
use crate::sparse_vector::{gumbel_outcome_log_pmfs, SvtOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeighborModel {
    /// One individual's record replaced.
    #[default]
    Swap,
    /// One individual's record added or removed.
    AddSubtract,
}

impl fmt::Display for NeighborModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NeighborModel::Swap => "swap",
            NeighborModel::AddSubtract => "add-subtract",
        })
    }
}

impl FromStr for NeighborModel {
    type Err = DpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "swap" => Ok(NeighborModel::Swap),
            "add-subtract" | "add_subtract" | "addsubtract" => Ok(NeighborModel::AddSubtract),
            other => Err(invalid("neighbor", format!("unknown neighbor model `{other}`"))),
        }
    }
}

/// Structural class of the query stream, which determines the loss bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryClass {
    /// Arbitrary sensitivity-Δ queries.
    General,
    /// Neighbors shift every query in the same direction.
    Monotonic,
    /// Counting queries minus `q·n` under add/remove neighbors.
    CountMinusQn,
    /// Counting queries against a threshold fixed in advance, add/remove neighbors.
    FixedThresholdCount,
}

impl FromStr for QueryClass {
    type Err = DpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "general" => Ok(QueryClass::General),
            "monotonic" => Ok(QueryClass::Monotonic),
            "count-minus-qn" => Ok(QueryClass::CountMinusQn),
            "fixed-threshold-count" => Ok(QueryClass::FixedThresholdCount),
            other => Err(invalid("class", format!("unknown query class `{other}`"))),
        }
    }
}

/// Pure-DP, zCDP and range-bounded parameters of a mechanism. Absent fields
/// mean no bound of that kind is claimed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrivacyGuarantee {
    pub eps_dp: Option<f64>,
    pub rho_zcdp: Option<f64>,
    pub gamma_range_bounded: Option<f64>,
}

impl PrivacyGuarantee {
    pub fn pure_dp(eps: f64) -> Self {
        Self {
            eps_dp: Some(eps),
            rho_zcdp: Some(dp_to_zcdp(eps)),
            gamma_range_bounded: None,
        }
    }

    /// Sequential composition: ε and ρ add; range-boundedness is not carried.
    pub fn compose(&self, other: &PrivacyGuarantee) -> PrivacyGuarantee {
        let add = |a: Option<f64>, b: Option<f64>| Some(a? + b?);
        PrivacyGuarantee {
            eps_dp: add(self.eps_dp, other.eps_dp),
            rho_zcdp: add(self.rho_zcdp, other.rho_zcdp),
            gamma_range_bounded: None,
        }
    }

    /// `times`-fold sequential composition of this guarantee with itself.
    pub fn repeat(&self, times: usize) -> PrivacyGuarantee {
        let t = times as f64;
        PrivacyGuarantee {
            eps_dp: self.eps_dp.map(|e| e * t),
            rho_zcdp: self.rho_zcdp.map(|r| r * t),
            gamma_range_bounded: None,
        }
    }
}

/// ε-DP implies ½ε²-zCDP.
pub fn dp_to_zcdp(eps: f64) -> f64 {
    0.5 * eps * eps
}

/// γ-range-bounded implies γ²/8-zCDP.
pub fn range_bounded_to_zcdp(gamma: f64) -> f64 {
    gamma * gamma / 8.0
}

/// Symbolic guarantee for one AboveThreshold call.
pub fn guarantee_for(
    class: QueryClass,
    neighbor: NeighborModel,
    noise: NoiseKind,
    eps1: f64,
    eps2: f64,
    q: Option<f64>,
) -> Result<PrivacyGuarantee> {
    require_positive("eps1", eps1)?;
    require_positive("eps2", eps2)?;
    if noise == NoiseKind::Gumbel && eps1 != eps2 {
        return Err(DpError::GumbelBudgetMismatch { eps1, eps2 });
    }
    let guarantee = match class {
        QueryClass::General => {
            let eps = eps1 + 2.0 * eps2;
            PrivacyGuarantee {
                eps_dp: Some(eps),
                rho_zcdp: Some(dp_to_zcdp(eps)),
                gamma_range_bounded: Some(2.0 * eps),
            }
        }
        QueryClass::Monotonic => {
            let gamma = eps1 + 2.0 * eps2;
            PrivacyGuarantee {
                eps_dp: Some(eps1 + eps2),
                rho_zcdp: Some(range_bounded_to_zcdp(gamma)),
                gamma_range_bounded: Some(gamma),
            }
        }
        QueryClass::CountMinusQn => {
            if neighbor != NeighborModel::AddSubtract {
                return Err(invalid("class", "count-minus-qn applies to add-subtract neighbors"));
            }
            let q = q.ok_or_else(|| invalid("q", "count-minus-qn requires a quantile"))?;
            require_unit_interval("q", q)?;
            let eps = ((1.0 - q) * eps1).max(q * eps1 + eps2);
            if noise == NoiseKind::Gumbel {
                // (ε₁+ε₂)-range-boundedness fails on exact small instances, so
                // only the zCDP figure is reported.
                PrivacyGuarantee {
                    eps_dp: Some(eps),
                    rho_zcdp: Some(range_bounded_to_zcdp(eps1 + eps2)),
                    gamma_range_bounded: None,
                }
            } else {
                PrivacyGuarantee::pure_dp(eps)
            }
        }
        QueryClass::FixedThresholdCount => {
            if neighbor != NeighborModel::AddSubtract {
                return Err(invalid(
                    "class",
                    "fixed-threshold-count applies to add-subtract neighbors",
                ));
            }
            let eps = eps1.max(eps2);
            // Each ordered pair has ε(x,x') ≤ ε₂ and ε(x',x) ≤ ε₁.
            let gamma = eps1 + eps2;
            PrivacyGuarantee {
                eps_dp: Some(eps),
                rho_zcdp: Some(dp_to_zcdp(eps).min(range_bounded_to_zcdp(gamma))),
                gamma_range_bounded: Some(gamma),
            }
        }
    };
    Ok(guarantee)
}

/// Budgets shared by the numeric loss evaluators.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    pub eps1: f64,
    pub eps2: f64,
    pub delta: f64,
    /// Drop the outer `max{0, ·}` in `Δ_k`. Not a valid bound in general: it
    /// can undershoot the exact Gumbel log-ratio when every earlier gap is
    /// negative.
    pub gumbel_relaxation: bool,
}

impl LossParams {
    pub fn new(eps1: f64, eps2: f64, delta: f64) -> Self {
        Self {
            eps1,
            eps2,
            delta,
            gumbel_relaxation: false,
        }
    }

    pub fn gumbel(eps: f64, delta: f64) -> Self {
        Self {
            eps1: eps,
            eps2: eps,
            delta,
            gumbel_relaxation: true,
        }
    }
}

/// Per-outcome terms of the one-sided loss; entry `k-1` bounds the log-ratio
/// of outcome `⊥^{k-1} ⊤`.
pub fn one_sided_loss_terms(f_x: &[f64], f_xprime: &[f64], params: &LossParams) -> Result<Vec<f64>> {
    if f_x.len() != f_xprime.len() {
        return Err(DpError::LengthMismatch(f_x.len(), f_xprime.len()));
    }
    require_positive("delta", params.delta)?;
    let (w1, w2) = (params.eps1 / params.delta, params.eps2 / params.delta);
    // Running max over i < k of the upward gap f_i(x') - f_i(x).
    let mut lead: Option<f64> = None;
    let mut terms = Vec::with_capacity(f_x.len());
    for (&fx, &fxp) in f_x.iter().zip(f_xprime) {
        let lead_k = match (lead, params.gumbel_relaxation) {
            (None, _) => 0.0,
            (Some(m), true) => m,
            (Some(m), false) => m.max(0.0),
        };
        terms.push(w1 * lead_k + w2 * (lead_k - (fxp - fx)).max(0.0));
        let gap = fxp - fx;
        lead = Some(lead.map_or(gap, |m| m.max(gap)));
    }
    Ok(terms)
}

/// One-sided privacy loss `ε(x, x')` of AboveThreshold on explicit query
/// values. Empty sequences have zero loss.
pub fn one_sided_loss(f_x: &[f64], f_xprime: &[f64], eps1: f64, eps2: f64, delta: f64) -> Result<f64> {
    one_sided_loss_with(f_x, f_xprime, &LossParams::new(eps1, eps2, delta))
}

pub fn one_sided_loss_with(f_x: &[f64], f_xprime: &[f64], params: &LossParams) -> Result<f64> {
    Ok(one_sided_loss_terms(f_x, f_xprime, params)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// `ε(x,x') + ε(x',x)`: the range-bounded parameter witnessed by this pair.
pub fn range_bounded_of_pair(f_x: &[f64], f_xprime: &[f64], eps1: f64, eps2: f64, delta: f64) -> Result<f64> {
    Ok(one_sided_loss(f_x, f_xprime, eps1, eps2, delta)?
        + one_sided_loss(f_xprime, f_x, eps1, eps2, delta)?)
}

/// zCDP composes additively.
pub fn compose_zcdp(parts: &[f64]) -> f64 {
    debug_assert!(parts.iter().all(|&r| r >= 0.0));
    parts.iter().sum()
}

/// Cost of estimating `m` quantiles by recursive splitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiQuantileCost {
    pub quantiles: usize,
    /// Number of composed levels, `ceil(log_2(m + 1))`.
    pub compositions: usize,
    pub log_base: u32,
    pub per_level: PrivacyGuarantee,
    pub total: PrivacyGuarantee,
}

/// Depth of the balanced split tree over `m` quantiles.
pub fn split_levels(m: usize) -> usize {
    // ceil(log2(m + 1)) is the bit length of m.
    (usize::BITS - m.leading_zeros()) as usize
}

pub fn multi_quantile_cost(m: usize, per_level: PrivacyGuarantee) -> MultiQuantileCost {
    let compositions = split_levels(m);
    MultiQuantileCost {
        quantiles: m,
        compositions,
        log_base: 2,
        per_level,
        total: per_level.repeat(compositions),
    }
}

/// Settings for [`empirical_dp_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpCheckConfig {
    pub claimed_eps: f64,
    pub trials: usize,
    /// Outcomes halting after this index are lumped with exhaustion.
    pub horizon: usize,
    pub seed: u64,
    /// Width of the confidence band in standard errors.
    pub z: f64,
}

impl DpCheckConfig {
    pub const MIN_TRIALS: usize = 100_000;

    pub fn new(claimed_eps: f64, trials: usize, horizon: usize, seed: u64) -> Self {
        Self {
            claimed_eps,
            trials,
            horizon,
            seed,
            z: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeEstimate {
    /// Halting index, or `None` for the lumped tail.
    pub halt: Option<usize>,
    pub p_x: f64,
    pub p_xprime: f64,
    /// `|ln(p_x / p_x')|` when both are positive.
    pub log_ratio: Option<f64>,
    /// Lower confidence bound on the larger of the two directed log-ratios.
    pub log_ratio_lower: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpCheckReport {
    pub claimed_eps: f64,
    pub trials: usize,
    pub max_log_ratio: f64,
    pub max_log_ratio_lower: f64,
    pub passed: bool,
    pub outcomes: Vec<OutcomeEstimate>,
}

/// Wilson score interval for a binomial proportion at `z` standard errors.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

const CHECK_CHUNK: usize = 10_000;

/// Counts of halts at `1..=horizon` followed by one bin for everything
/// later. Chunk `c` draws from stream `2c + parity`, so two runners sharing a
/// seed but not a parity never share randomness.
pub fn outcome_counts<F>(run: &F, trials: usize, horizon: usize, seed: u64, parity: u64) -> Vec<u64>
where
    F: Fn(&mut RandomSource) -> SvtOutcome + Sync,
{
    let chunks = trials.div_ceil(CHECK_CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = RandomSource::new(seed, 2 * c as u64 + parity);
            let mut counts = vec![0u64; horizon + 1];
            let n = CHECK_CHUNK.min(trials - c * CHECK_CHUNK);
            for _ in 0..n {
                let bin = match run(&mut rng) {
                    SvtOutcome::Halted(k) if k <= horizon => k - 1,
                    _ => horizon,
                };
                counts[bin] += 1;
            }
            counts
        })
        .reduce(
            || vec![0u64; horizon + 1],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        )
}

/// Monte Carlo test of a claimed ε on one neighbor pair.
///
/// Both runners are sampled `trials` times. The check fails only when some
/// outcome's log-ratio is above the claim even at the lower edge of the
/// Wilson band, so sampling noise alone does not cause false failures.
pub fn empirical_dp_check<F, G>(run_x: F, run_xprime: G, cfg: &DpCheckConfig) -> Result<DpCheckReport>
where
    F: Fn(&mut RandomSource) -> SvtOutcome + Sync,
    G: Fn(&mut RandomSource) -> SvtOutcome + Sync,
{
    if cfg.trials < DpCheckConfig::MIN_TRIALS {
        return Err(DpError::InsufficientTrials {
            trials: cfg.trials,
            required: DpCheckConfig::MIN_TRIALS,
        });
    }
    if cfg.horizon == 0 {
        return Err(invalid("horizon", "must be at least 1"));
    }
    let counts_x = outcome_counts(&run_x, cfg.trials, cfg.horizon, cfg.seed, 0);
    let counts_xp = outcome_counts(&run_xprime, cfg.trials, cfg.horizon, cfg.seed, 1);
    let n = cfg.trials as u64;
    let mut max_ratio = 0.0f64;
    let mut max_lower = f64::NEG_INFINITY;
    let outcomes = counts_x
        .iter()
        .zip(&counts_xp)
        .enumerate()
        .map(|(bin, (&cx, &cxp))| {
            let p_x = cx as f64 / n as f64;
            let p_xprime = cxp as f64 / n as f64;
            let log_ratio = (cx > 0 && cxp > 0).then(|| (p_x / p_xprime).ln().abs());
            if let Some(r) = log_ratio {
                max_ratio = max_ratio.max(r);
            }
            let (lo_x, hi_x) = wilson_interval(cx, n, cfg.z);
            let (lo_xp, hi_xp) = wilson_interval(cxp, n, cfg.z);
            let forward = (lo_x > 0.0).then(|| (lo_x / hi_xp).ln());
            let backward = (lo_xp > 0.0).then(|| (lo_xp / hi_x).ln());
            let log_ratio_lower = match (forward, backward) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            };
            if let Some(l) = log_ratio_lower {
                max_lower = max_lower.max(l);
            }
            OutcomeEstimate {
                halt: (bin < cfg.horizon).then_some(bin + 1),
                p_x,
                p_xprime,
                log_ratio,
                log_ratio_lower,
            }
        })
        .collect();
    Ok(DpCheckReport {
        claimed_eps: cfg.claimed_eps,
        trials: cfg.trials,
        max_log_ratio: max_ratio,
        max_log_ratio_lower: max_lower,
        passed: max_lower <= cfg.claimed_eps,
        outcomes,
    })
}

/// Exact DP audit for Gumbel AboveThreshold from the closed-form PMF.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactGumbelCheck {
    /// `ln(P_x(k) / P_x'(k))` per halting outcome `k`.
    pub log_ratios: Vec<f64>,
    pub max_log_ratio: f64,
    /// One-sided loss `ε(x, x')`.
    pub loss_bound: f64,
    /// The same loss with the relaxed `Δ_k`.
    pub relaxed_bound: f64,
    /// Whether `max_log_ratio` stays under `relaxed_bound`.
    pub relaxed_holds: bool,
    /// Every outcome's log-ratio is within its own loss term.
    pub passed: bool,
}

fn within(value: f64, bound: f64) -> bool {
    value <= bound + 1e-9 * (1.0 + bound.abs())
}

pub fn gumbel_exact_dp_check(
    f_x: &[f64],
    f_xprime: &[f64],
    threshold: f64,
    eps: f64,
    delta: f64,
) -> Result<ExactGumbelCheck> {
    let sound = one_sided_loss_terms(f_x, f_xprime, &LossParams::new(eps, eps, delta))?;
    let relaxed = one_sided_loss_terms(f_x, f_xprime, &LossParams::gumbel(eps, delta))?;
    let lx = gumbel_outcome_log_pmfs(f_x, threshold, eps, delta);
    let lxp = gumbel_outcome_log_pmfs(f_xprime, threshold, eps, delta);
    let log_ratios: Vec<f64> = lx.iter().zip(&lxp).map(|(a, b)| a - b).collect();
    let max_log_ratio = log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let loss_bound = sound.iter().copied().fold(0.0, f64::max);
    let relaxed_bound = relaxed.iter().copied().fold(0.0, f64::max);
    // The trailing entry is the no-halt outcome, bounded by the whole loss.
    let passed = log_ratios
        .iter()
        .enumerate()
        .all(|(k, &r)| within(r, sound.get(k).copied().unwrap_or(loss_bound)));
    Ok(ExactGumbelCheck {
        log_ratios,
        max_log_ratio,
        loss_bound,
        relaxed_bound,
        relaxed_holds: within(max_log_ratio, relaxed_bound),
        passed,
    })
}
