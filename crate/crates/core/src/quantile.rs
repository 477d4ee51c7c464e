//! Unbounded quantile estimation (UQE) by guess-and-check.
//!
//! Candidates `β^i + ℓ - 1` grow geometrically from the lower bound and
//! AboveThreshold stops at the first one whose (noisy) count of points below
//! it reaches `q·n`. Preprocessing is a single pass into a
//! [`LogBucketHistogram`]; each query afterwards is O(1).
//!
//! Indexing: the lower-bounded search starts its stream at `i = 1`, so the
//! smallest possible output is `β + ℓ - 1`. The fully unbounded search starts
//! both of its streams at `i = 0`, whose query counts the points strictly on
//! the other side of zero.

use serde::{Deserialize, Serialize};

use crate::accounting::{
    guarantee_for, multi_quantile_cost, MultiQuantileCost, NeighborModel, PrivacyGuarantee, QueryClass,
};
use crate::error::{invalid, require_positive, require_unit_interval, DpError, Result};
use crate::histogram::{CountingStream, LogBucketHistogram};
use crate::noise::{NoiseKind, RandomSource};
use crate::sparse_vector::{
    gumbel_outcome_pmfs, run_above_threshold, run_above_threshold_noiseless, QueryStream, SvtConfig,
    SvtOutcome, DEFAULT_MAX_QUERIES,
};
use crate::emq::{PdfStep, StepPdf};

/// Growth factor for inner quantiles.
pub const DEFAULT_BETA: f64 = 1.001;
/// Growth factor suggested when the estimate is used as a clipping bound.
pub const CLIPPING_BETA: f64 = 1.01;

/// Real-valued data with an optional declared lower bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    values: Vec<f64>,
    lower: Option<f64>,
}

impl Dataset {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(DpError::EmptyDataset);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DpError::NonFinite(i));
        }
        Ok(Self { values, lower: None })
    }

    pub fn with_lower_bound(values: Vec<f64>, lower: f64) -> Result<Self> {
        let mut data = Self::new(values)?;
        if !lower.is_finite() {
            return Err(invalid("lower", "must be finite"));
        }
        if let Some((index, &value)) = data.values.iter().enumerate().find(|(_, &v)| v < lower) {
            return Err(DpError::BelowLowerBound { index, value, lower });
        }
        data.lower = Some(lower);
        Ok(data)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn lower_bound(&self) -> Option<f64> {
        self.lower
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Parameters of one private quantile query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileRequest {
    pub q: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub beta: f64,
    pub noise: NoiseKind,
    pub neighbor: NeighborModel,
    pub max_queries: usize,
}

impl QuantileRequest {
    /// Total budget `eps` split evenly between threshold and queries, with
    /// exponential noise, `β = 1.001` and swap neighbors.
    pub fn new(q: f64, eps: f64) -> Result<Self> {
        let req = Self {
            q,
            eps1: eps / 2.0,
            eps2: eps / 2.0,
            beta: DEFAULT_BETA,
            noise: NoiseKind::default(),
            neighbor: NeighborModel::Swap,
            max_queries: DEFAULT_MAX_QUERIES,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn with_budgets(mut self, eps1: f64, eps2: f64) -> Self {
        self.eps1 = eps1;
        self.eps2 = eps2;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_noise(mut self, noise: NoiseKind) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_neighbor(mut self, neighbor: NeighborModel) -> Self {
        self.neighbor = neighbor;
        self
    }

    pub fn with_max_queries(mut self, max_queries: usize) -> Self {
        self.max_queries = max_queries;
        self
    }

    pub fn with_q(mut self, q: f64) -> Self {
        self.q = q;
        self
    }

    pub fn validate(&self) -> Result<()> {
        require_unit_interval("q", self.q)?;
        require_positive("eps1", self.eps1)?;
        require_positive("eps2", self.eps2)?;
        if !(self.beta.is_finite() && self.beta > 1.0) {
            return Err(invalid("beta", format!("must be finite and > 1, got {}", self.beta)));
        }
        if self.max_queries == 0 {
            return Err(invalid("max_queries", "must be positive"));
        }
        if self.noise == NoiseKind::Gumbel && self.eps1 != self.eps2 {
            return Err(DpError::GumbelBudgetMismatch {
                eps1: self.eps1,
                eps2: self.eps2,
            });
        }
        Ok(())
    }

    fn svt_config(&self, threshold: f64) -> Result<SvtConfig> {
        SvtConfig::new(self.eps1, self.eps2, self.noise, threshold)
    }

    /// Guarantee of one AboveThreshold call on counting queries.
    pub fn guarantee(&self) -> Result<PrivacyGuarantee> {
        let (class, q) = match self.neighbor {
            NeighborModel::Swap => (QueryClass::Monotonic, None),
            NeighborModel::AddSubtract => (QueryClass::CountMinusQn, Some(self.q)),
        };
        guarantee_for(class, self.neighbor, self.noise, self.eps1, self.eps2, q)
    }
}

/// Output of a single lower-bounded estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileEstimate {
    pub value: f64,
    /// Grid index `k` of the returned candidate `β^k + ℓ - 1`.
    pub index: usize,
    /// The query cap was reached; `value` is the last candidate checked.
    pub exhausted: bool,
    pub queries: usize,
}

/// Decides where a counting stream halts: privately, or exactly for oracles.
pub(crate) trait Halting {
    fn halt(&mut self, stream: &mut CountingStream<'_>, threshold: f64) -> SvtOutcome;
}

pub(crate) struct PrivateHalting<'r> {
    eps1: f64,
    eps2: f64,
    noise: NoiseKind,
    rng: &'r mut RandomSource,
}

impl<'r> PrivateHalting<'r> {
    pub(crate) fn new(req: &QuantileRequest, rng: &'r mut RandomSource) -> Result<Self> {
        req.validate()?;
        Ok(Self {
            eps1: req.eps1,
            eps2: req.eps2,
            noise: req.noise,
            rng,
        })
    }
}

impl Halting for PrivateHalting<'_> {
    fn halt(&mut self, stream: &mut CountingStream<'_>, threshold: f64) -> SvtOutcome {
        let cfg = SvtConfig::new(self.eps1, self.eps2, self.noise, threshold).expect("validated request");
        run_above_threshold(stream, &cfg, self.rng)
    }
}

pub(crate) struct ExactHalting;

impl Halting for ExactHalting {
    fn halt(&mut self, stream: &mut CountingStream<'_>, threshold: f64) -> SvtOutcome {
        run_above_threshold_noiseless(stream, threshold)
    }
}

/// Map a stream outcome to a grid index, given the stream's first index.
fn grid_index(outcome: SvtOutcome, start: u64) -> usize {
    match outcome {
        SvtOutcome::Halted(k) => start as usize + k - 1,
        SvtOutcome::Exhausted { queries } => (start as usize + queries).saturating_sub(1),
    }
}

fn search_from<H: Halting>(
    hist: &LogBucketHistogram,
    threshold: f64,
    max_queries: usize,
    halting: &mut H,
) -> QuantileEstimate {
    let mut stream = hist.query_stream(1, max_queries);
    let outcome = halting.halt(&mut stream, threshold);
    let index = grid_index(outcome, 1);
    QuantileEstimate {
        value: hist.candidate(index),
        index,
        exhausted: outcome.is_exhausted(),
        queries: outcome.queries(),
    }
}

fn lower_bound_of(data: &Dataset) -> Result<f64> {
    data.lower_bound().ok_or(DpError::MissingLowerBound)
}

/// Private `q`-quantile of lower-bounded data.
///
/// Runs AboveThreshold with `T = q·n` over `f_i = |{x : x - ℓ + 1 < β^i}|`
/// and returns `β^k + ℓ - 1` for the halting index `k`.
pub fn estimate_quantile(data: &Dataset, req: &QuantileRequest, rng: &mut RandomSource) -> Result<QuantileEstimate> {
    req.validate()?;
    let hist = LogBucketHistogram::build(data.values(), req.beta, lower_bound_of(data)?)?;
    estimate_quantile_from_histogram(&hist, req, rng)
}

/// Same as [`estimate_quantile`] on a prebuilt histogram.
pub fn estimate_quantile_from_histogram(
    hist: &LogBucketHistogram,
    req: &QuantileRequest,
    rng: &mut RandomSource,
) -> Result<QuantileEstimate> {
    estimate_with_threshold(hist, req.q * hist.len() as f64, req, rng)
}

/// UQE against an explicit count threshold instead of `q·n`.
pub fn estimate_with_threshold(
    hist: &LogBucketHistogram,
    threshold: f64,
    req: &QuantileRequest,
    rng: &mut RandomSource,
) -> Result<QuantileEstimate> {
    req.svt_config(threshold)?;
    let mut halting = PrivateHalting::new(req, rng)?;
    Ok(search_from(hist, threshold, req.max_queries, &mut halting))
}

/// Output of the two-sided search over fully unbounded data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnboundedEstimate {
    pub value: f64,
    /// Search over the positive half, indices from 0.
    pub positive: SvtOutcome,
    /// Search over the negated data, indices from 0.
    pub negative: SvtOutcome,
    /// Whichever call determined `value` hit its query cap.
    pub exhausted: bool,
}

fn unbounded_with<H: Halting>(values: &[f64], req: &QuantileRequest, halting: &mut H) -> Result<UnboundedEstimate> {
    req.validate()?;
    if values.is_empty() {
        return Err(DpError::EmptyDataset);
    }
    let n = values.len() as f64;
    let pos = LogBucketHistogram::build_with_underflow(values, req.beta, 0.0)?;
    let negated: Vec<f64> = values.iter().map(|v| -v).collect();
    let neg = LogBucketHistogram::build_with_underflow(&negated, req.beta, 0.0)?;

    let positive = halting.halt(&mut pos.query_stream(0, req.max_queries), req.q * n);
    let negative = halting.halt(&mut neg.query_stream(0, req.max_queries), (1.0 - req.q) * n);

    let k_pos = grid_index(positive, 0);
    let k_neg = grid_index(negative, 0);
    let (value, exhausted) = if k_pos > 0 {
        (pos.grid().power(k_pos) - 1.0, positive.is_exhausted())
    } else if k_neg > 0 {
        (-neg.grid().power(k_neg) + 1.0, negative.is_exhausted())
    } else {
        (0.0, false)
    };
    Ok(UnboundedEstimate {
        value,
        positive,
        negative,
        exhausted,
    })
}

/// Private quantile of data with no bounds at all, from two searches: one
/// upward from 0 over the data and one upward from 0 over the negated data.
/// The two calls compose; see [`unbounded_guarantee`].
pub fn estimate_quantile_unbounded(
    data: &Dataset,
    req: &QuantileRequest,
    rng: &mut RandomSource,
) -> Result<UnboundedEstimate> {
    let mut halting = PrivateHalting::new(req, rng)?;
    unbounded_with(data.values(), req, &mut halting)
}

/// Two AboveThreshold calls composed.
pub fn unbounded_guarantee(req: &QuantileRequest) -> Result<PrivacyGuarantee> {
    let one = req.guarantee()?;
    Ok(one.compose(&one))
}

fn inverted_with<H: Halting>(
    values: &[f64],
    upper: f64,
    req: &QuantileRequest,
    halting: &mut H,
) -> Result<QuantileEstimate> {
    req.validate()?;
    let negated: Vec<f64> = values.iter().map(|v| -v).collect();
    let flipped = Dataset::with_lower_bound(negated, -upper)?;
    let hist = LogBucketHistogram::build(flipped.values(), req.beta, -upper)?;
    let mut est = search_from(&hist, (1.0 - req.q) * hist.len() as f64, req.max_queries, halting);
    est.value = -est.value;
    Ok(est)
}

/// Small quantiles of upper-bounded data: negate, search for `1 - q` from
/// `-upper`, negate back. A smaller `β` is usually warranted here.
pub fn estimate_small_quantile_inverted(
    data: &Dataset,
    upper: f64,
    req: &QuantileRequest,
    rng: &mut RandomSource,
) -> Result<QuantileEstimate> {
    let mut halting = PrivateHalting::new(req, rng)?;
    inverted_with(data.values(), upper, req, &mut halting)
}

/// Result of recursive multi-quantile estimation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiQuantileEstimate {
    pub qs: Vec<f64>,
    pub values: Vec<f64>,
    /// Node had no data; its value is the slice's lower boundary.
    pub empty_slice: Vec<bool>,
    pub exhausted: Vec<bool>,
    pub cost: MultiQuantileCost,
}

fn validate_qs(qs: &[f64]) -> Result<()> {
    if qs.is_empty() {
        return Err(invalid("qs", "at least one quantile required"));
    }
    if qs.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
        return Err(invalid("qs", "quantiles must lie strictly inside (0, 1)"));
    }
    if qs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("qs", "quantiles must be sorted and distinct"));
    }
    Ok(())
}

struct SplitNode<'q> {
    values: Vec<f64>,
    lower: f64,
    upper: f64,
    q_lo: f64,
    /// Global positions of the quantiles handled by this subtree.
    offset: usize,
    qs: &'q [f64],
}

fn multiple_with<H: Halting>(
    data: &Dataset,
    qs: &[f64],
    req: &QuantileRequest,
    halting: &mut H,
) -> Result<MultiQuantileEstimate> {
    req.validate()?;
    validate_qs(qs)?;
    let lower = lower_bound_of(data)?;
    let n = data.len() as f64;
    let m = qs.len();
    let mut values = vec![f64::NAN; m];
    let mut empty_slice = vec![false; m];
    let mut exhausted = vec![false; m];

    // Depth-first, left subtree before right, so randomness use is fixed.
    let mut stack = vec![SplitNode {
        values: data.values().to_vec(),
        lower,
        upper: f64::INFINITY,
        q_lo: 0.0,
        offset: 0,
        qs,
    }];
    while let Some(node) = stack.pop() {
        if node.qs.is_empty() {
            continue;
        }
        let mid = node.qs.len() / 2;
        let q_mid = node.qs[mid];
        let slot = node.offset + mid;
        // Thresholds come from the target proportions and the global n, not
        // from realized slice sizes, so they are fixed before any split.
        let threshold = (q_mid - node.q_lo) * n;
        let estimate = if node.values.is_empty() {
            empty_slice[slot] = true;
            node.lower
        } else {
            let hist = LogBucketHistogram::build(&node.values, req.beta, node.lower)?;
            let est = search_from(&hist, threshold, req.max_queries, halting);
            exhausted[slot] = est.exhausted;
            // Left-subtree candidates may overshoot the parent split; clamping
            // is post-processing and keeps outputs ordered.
            est.value.min(node.upper)
        };
        values[slot] = estimate;

        let (left, right): (Vec<f64>, Vec<f64>) = node.values.iter().partition(|&&v| v <= estimate);
        stack.push(SplitNode {
            values: right,
            lower: estimate,
            upper: node.upper,
            q_lo: q_mid,
            offset: slot + 1,
            qs: &node.qs[mid + 1..],
        });
        stack.push(SplitNode {
            values: left,
            lower: node.lower,
            upper: estimate,
            q_lo: node.q_lo,
            offset: node.offset,
            qs: &node.qs[..mid],
        });
    }

    let per_level = match req.neighbor {
        NeighborModel::Swap => req.guarantee()?,
        // Thresholds are fixed in advance, so each of the two differing
        // partitions costs max{ε₁, ε₂}.
        NeighborModel::AddSubtract => {
            let one = guarantee_for(
                QueryClass::FixedThresholdCount,
                NeighborModel::AddSubtract,
                req.noise,
                req.eps1,
                req.eps2,
                None,
            )?;
            one.compose(&one)
        }
    };
    Ok(MultiQuantileEstimate {
        qs: qs.to_vec(),
        values,
        empty_slice,
        exhausted,
        cost: multi_quantile_cost(m, per_level),
    })
}

/// Several quantiles by recursive splitting: estimate the middle quantile,
/// split the data at it (ties go left), and recurse on each side with the
/// remaining quantiles. Tree depth is `ceil(log2(m + 1))`.
pub fn estimate_multiple_quantiles(
    data: &Dataset,
    qs: &[f64],
    req: &QuantileRequest,
    rng: &mut RandomSource,
) -> Result<MultiQuantileEstimate> {
    let mut halting = PrivateHalting::new(req, rng)?;
    multiple_with(data, qs, req, &mut halting)
}

/// Zero-noise versions of the estimators for correctness oracles.
///
/// These compare exact counts against the threshold and release data
/// without any privacy protection. They exist so tests and the verification
/// harness can check the search logic against brute force.
#[doc(hidden)]
pub mod noiseless {
    use super::*;

    pub fn estimate_quantile(data: &Dataset, req: &QuantileRequest) -> Result<QuantileEstimate> {
        req.validate()?;
        let hist = LogBucketHistogram::build(data.values(), req.beta, lower_bound_of(data)?)?;
        Ok(estimate_from_histogram(&hist, req.q * hist.len() as f64, req.max_queries))
    }

    pub fn estimate_from_histogram(hist: &LogBucketHistogram, threshold: f64, max_queries: usize) -> QuantileEstimate {
        search_from(hist, threshold, max_queries, &mut ExactHalting)
    }

    pub fn estimate_quantile_unbounded(data: &Dataset, req: &QuantileRequest) -> Result<UnboundedEstimate> {
        unbounded_with(data.values(), req, &mut ExactHalting)
    }

    pub fn estimate_small_quantile_inverted(
        data: &Dataset,
        upper: f64,
        req: &QuantileRequest,
    ) -> Result<QuantileEstimate> {
        inverted_with(data.values(), upper, req, &mut ExactHalting)
    }

    pub fn estimate_multiple_quantiles(
        data: &Dataset,
        qs: &[f64],
        req: &QuantileRequest,
    ) -> Result<MultiQuantileEstimate> {
        multiple_with(data, qs, req, &mut ExactHalting)
    }
}

/// Step PDF of UQE when the output is drawn uniformly from
/// `[β^{k-1} + ℓ - 1, β^k + ℓ - 1]` after halting at `k`, computed from the
/// Gumbel closed form (`ε₁ = ε₂ = eps`). Steps cover candidates up to
/// `upto`; the remaining mass (later halts or none) is not represented.
pub fn uqe_pdf_steps(hist: &LogBucketHistogram, q: f64, eps: f64, upto: f64) -> Result<StepPdf> {
    require_unit_interval("q", q)?;
    require_positive("eps", eps)?;
    let mut stream = hist.query_stream(1, usize::MAX);
    let mut queries = Vec::new();
    let mut k = 1;
    loop {
        queries.push(stream.next_query().expect("counting streams are infinite"));
        if hist.candidate(k - 1) >= upto || k >= DEFAULT_MAX_QUERIES {
            break;
        }
        k += 1;
    }
    let pmfs = gumbel_outcome_pmfs(&queries, q * hist.len() as f64, eps, 1.0);
    let steps = pmfs
        .into_iter()
        .enumerate()
        .map(|(i, mass)| PdfStep {
            lo: hist.candidate(i),
            hi: hist.candidate(i + 1),
            mass,
        })
        .collect();
    Ok(StepPdf::new(steps))
}
