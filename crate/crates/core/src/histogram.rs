//! Log-bucket histogram behind the O(1)-per-query counting stream.
//!
//! A point `x` with shifted value `v = x - ℓ + 1 ≥ 1` lands in bucket `i`
//! with `β^i ≤ v < β^{i+1}`, where `β^i` is taken from a grid built by
//! repeated multiplication. The bucket is first guessed from `ln v / ln β`
//! and then corrected against the grid, so the prefix identity
//! `Σ_{b<i} count(b) = |{x : v < β^i}|` holds exactly for the same grid
//! values the candidates are drawn from.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, DpError, Result};
use crate::sparse_vector::{QueryStream, DEFAULT_MAX_QUERIES};

/// Grid indices past this are bucketed from the logarithm alone.
const MAX_CACHED_POWERS: usize = 1 << 22;

/// `β^i` for `i = 0, 1, ...` computed by repeated multiplication.
#[derive(Clone, Debug)]
pub struct BetaGrid {
    beta: f64,
    ln_beta: f64,
    powers: Vec<f64>,
}

impl BetaGrid {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta.is_finite() && beta > 1.0) {
            return Err(invalid("beta", format!("must be finite and > 1, got {beta}")));
        }
        Ok(Self {
            beta,
            ln_beta: beta.ln(),
            powers: vec![1.0, beta],
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    fn ensure(&mut self, index: usize) {
        while self.powers.len() <= index {
            let last = *self.powers.last().expect("grid is never empty");
            self.powers.push(last * self.beta);
        }
    }

    /// `β^i` on the grid; continues the multiplication past the cache.
    pub fn power(&self, index: usize) -> f64 {
        if let Some(&p) = self.powers.get(index) {
            return p;
        }
        let mut p = *self.powers.last().expect("grid is never empty");
        for _ in self.powers.len()..=index {
            p *= self.beta;
        }
        p
    }

    /// Bucket of a shifted value `v ≥ 1`.
    fn bucket(&mut self, v: f64) -> u64 {
        let guess = (v.ln() / self.ln_beta).floor();
        if !(guess < (MAX_CACHED_POWERS - 1) as f64) {
            return guess as u64;
        }
        let mut i = guess.max(0.0) as usize;
        self.ensure(i + 1);
        while i > 0 && v < self.powers[i] {
            i -= 1;
        }
        while v >= self.powers[i + 1] {
            i += 1;
            if i + 1 >= MAX_CACHED_POWERS {
                break;
            }
            self.ensure(i + 1);
        }
        i as u64
    }
}

// The cache is derived state; two grids are equal when their base is.
impl PartialEq for BetaGrid {
    fn eq(&self, other: &Self) -> bool {
        self.beta == other.beta
    }
}

/// Counts of points per log bucket after shifting by `1 - ℓ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogBucketHistogram {
    grid: BetaGrid,
    ell: f64,
    counts: HashMap<u64, u64>,
    n: u64,
    /// Points with `x - ℓ + 1 < 1`; only the fully unbounded search keeps these.
    below: u64,
}

impl LogBucketHistogram {
    /// Single pass over unsorted data. Every value must be `≥ ell`.
    pub fn build(values: &[f64], beta: f64, ell: f64) -> Result<Self> {
        Self::build_inner(values, beta, ell, false)
    }

    /// Like [`build`](Self::build) but points below `ell` are tallied in a
    /// separate underflow count instead of being rejected.
    pub(crate) fn build_with_underflow(values: &[f64], beta: f64, ell: f64) -> Result<Self> {
        Self::build_inner(values, beta, ell, true)
    }

    fn build_inner(values: &[f64], beta: f64, ell: f64, allow_below: bool) -> Result<Self> {
        if !ell.is_finite() {
            return Err(invalid("lower", "must be finite"));
        }
        let mut grid = BetaGrid::new(beta)?;
        let mut counts: HashMap<u64, u64> = HashMap::new();
        let mut below = 0u64;
        for (index, &x) in values.iter().enumerate() {
            if !x.is_finite() {
                return Err(DpError::NonFinite(index));
            }
            let v = x - ell + 1.0;
            if v < 1.0 {
                if allow_below {
                    below += 1;
                    continue;
                }
                return Err(DpError::BelowLowerBound {
                    index,
                    value: x,
                    lower: ell,
                });
            }
            *counts.entry(grid.bucket(v)).or_insert(0) += 1;
        }
        Ok(Self {
            grid,
            ell,
            counts,
            n: values.len() as u64,
            below,
        })
    }

    pub fn beta(&self) -> f64 {
        self.grid.beta
    }

    pub fn lower_bound(&self) -> f64 {
        self.ell
    }

    pub fn len(&self) -> u64 {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn grid(&self) -> &BetaGrid {
        &self.grid
    }

    pub fn underflow(&self) -> u64 {
        self.below
    }

    pub fn count(&self, bucket: u64) -> u64 {
        self.counts.get(&bucket).copied().unwrap_or(0)
    }

    /// Occupied buckets in ascending order.
    pub fn buckets(&self) -> BTreeMap<u64, u64> {
        self.counts.iter().map(|(&k, &v)| (k, v)).collect()
    }

    /// `|{x : x - ℓ + 1 < β^i}|`, summed directly from the buckets.
    pub fn prefix_count(&self, index: u64) -> u64 {
        self.below
            + self
                .counts
                .iter()
                .filter(|(&b, _)| b < index)
                .map(|(_, &c)| c)
                .sum::<u64>()
    }

    /// Candidate value for grid index `i`: `β^i + ℓ - 1`.
    pub fn candidate(&self, index: usize) -> f64 {
        self.grid.power(index) + self.ell - 1.0
    }

    /// Counting queries `f_i = |{x : x - ℓ + 1 < β^i}|` for
    /// `i = start, start + 1, ...`. Sensitivity 1 and monotone under swaps.
    pub fn query_stream(&self, start: u64, max_queries: usize) -> CountingStream<'_> {
        let prefix = self.below + (0..start).map(|b| self.count(b)).sum::<u64>();
        CountingStream {
            hist: self,
            next_index: start,
            prefix,
            max_queries,
        }
    }
}

/// Incremental prefix counts over a [`LogBucketHistogram`].
#[derive(Clone, Debug)]
pub struct CountingStream<'a> {
    hist: &'a LogBucketHistogram,
    next_index: u64,
    prefix: u64,
    max_queries: usize,
}

impl CountingStream<'_> {
    /// Grid index the next query will evaluate.
    pub fn next_index(&self) -> u64 {
        self.next_index
    }
}

impl QueryStream for CountingStream<'_> {
    fn sensitivity(&self) -> f64 {
        1.0
    }

    fn is_monotonic(&self) -> bool {
        true
    }

    fn max_queries(&self) -> usize {
        self.max_queries
    }

    #[inline]
    fn next_query(&mut self) -> Option<f64> {
        let value = self.prefix;
        self.prefix += self.hist.count(self.next_index);
        self.next_index += 1;
        Some(value as f64)
    }
}

/// Counting stream starting at `f_1` with the default cap.
pub fn counting_query_stream(hist: &LogBucketHistogram) -> CountingStream<'_> {
    hist.query_stream(1, DEFAULT_MAX_QUERIES)
}

#[derive(Serialize, Deserialize)]
struct HistogramFile {
    beta: f64,
    ell: f64,
    n: u64,
    #[serde(default, skip_serializing_if = "is_zero")]
    below: u64,
    counts: BTreeMap<u64, u64>,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

impl Serialize for LogBucketHistogram {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        HistogramFile {
            beta: self.grid.beta,
            ell: self.ell,
            n: self.n,
            below: self.below,
            counts: self.buckets(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for LogBucketHistogram {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error;
        let file = HistogramFile::deserialize(deserializer)?;
        let grid = BetaGrid::new(file.beta).map_err(D::Error::custom)?;
        let total = file.below + file.counts.values().sum::<u64>();
        if total != file.n {
            return Err(D::Error::custom(format!(
                "bucket counts sum to {total}, expected n = {}",
                file.n
            )));
        }
        Ok(Self {
            grid,
            ell: file.ell,
            counts: file.counts.into_iter().filter(|&(_, c)| c > 0).collect(),
            n: file.n,
            below: file.below,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::RandomSource;

    #[test]
    fn bucket_arithmetic() {
        let h = LogBucketHistogram::build(&[10.0], 2.0, 0.0).unwrap();
        assert_eq!(h.count(3), 1);
        let h = LogBucketHistogram::build(&[4.5], 1.5, 4.5).unwrap();
        assert_eq!(h.count(0), 1);
    }

    #[test]
    fn exact_grid_boundaries_go_up() {
        // v = 8 = 2^3 exactly belongs to bucket 3.
        let h = LogBucketHistogram::build(&[7.0, 6.999], 2.0, 0.0).unwrap();
        assert_eq!(h.count(3), 1);
        assert_eq!(h.count(2), 1);
        let grid = BetaGrid::new(1.001).unwrap();
        let b50 = grid.power(50);
        let h = LogBucketHistogram::build(&[b50 - 1.0], 1.001, 0.0).unwrap();
        assert_eq!(h.buckets().keys().copied().collect::<Vec<_>>(), vec![50]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            LogBucketHistogram::build(&[1.0, -0.5], 1.1, 0.0),
            Err(DpError::BelowLowerBound { index: 1, .. })
        ));
        assert!(LogBucketHistogram::build(&[1.0], 1.0, 0.0).is_err());
        assert!(LogBucketHistogram::build(&[f64::NAN], 1.1, 0.0).is_err());
    }

    #[test]
    fn prefix_counts_match_direct_scan() {
        let mut rng = RandomSource::new(77, 0);
        let ell = -3.0;
        let values: Vec<f64> = (0..10_000).map(|_| ell + rng.uniform(0.0, 1.0).powi(3) * 5_000.0).collect();
        for beta in [1.001, 1.01, 1.1] {
            let h = LogBucketHistogram::build(&values, beta, ell).unwrap();
            assert_eq!(h.buckets().values().sum::<u64>(), 10_000);
            for _ in 0..100 {
                let i = rng.below(1 + (5_001f64.ln() / beta.ln()) as usize) as u64;
                let t = h.grid().power(i as usize);
                let direct = values.iter().filter(|&&x| x - ell + 1.0 < t).count() as u64;
                assert_eq!(h.prefix_count(i), direct, "beta {beta} index {i}");
            }
        }
    }

    #[test]
    fn stream_is_incremental_prefix() {
        let values = [0.0, 0.5, 1.0, 3.0, 3.0, 10.0];
        let h = LogBucketHistogram::build(&values, 1.5, 0.0).unwrap();
        let mut s = counting_query_stream(&h);
        let mut prev = 0.0;
        for i in 1..20u64 {
            let f = s.next_query().unwrap();
            assert_eq!(f, h.prefix_count(i) as f64);
            assert!(f >= prev);
            prev = f;
        }
        assert_eq!(prev, values.len() as f64);
        // f_1 counts bucket 0 only.
        assert_eq!(h.query_stream(1, 10).next_query(), Some(h.count(0) as f64));
    }

    #[test]
    fn underflow_stream_starts_at_zero() {
        let values = [-2.0, -0.5, 0.0, 4.0];
        let h = LogBucketHistogram::build_with_underflow(&values, 2.0, 0.0).unwrap();
        assert_eq!(h.underflow(), 2);
        let mut s = h.query_stream(0, 10);
        assert_eq!(s.next_query(), Some(2.0));
        assert_eq!(s.next_query(), Some(3.0));
    }

    #[test]
    fn json_round_trip() {
        let h = LogBucketHistogram::build(&[1.0, 2.0, 30.0, 30.5], 1.01, 1.0).unwrap();
        let json = serde_json::to_string(&h).unwrap();
        assert!(json.starts_with("{\"beta\":1.01,\"ell\":1.0"));
        let back: LogBucketHistogram = serde_json::from_str(&json).unwrap();
        assert_eq!(back, h);
        let bad = json.replace("\"n\":4", "\"n\":5");
        assert!(serde_json::from_str::<LogBucketHistogram>(&bad).is_err());
    }
}
