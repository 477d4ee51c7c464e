//! Differentially private quantiles without a declared upper bound.
//!
//! The central estimator runs AboveThreshold over counting queries on a
//! geometric grid of candidates, so only a lower bound on the data is needed
//! (or none at all, via a two-sided search). Also included: privacy loss
//! accounting for AboveThreshold, the exponential-mechanism baseline over a
//! bounded range, clipped sums, and an experiment harness.

pub mod accounting;
pub mod aggregates;
pub mod bench;
pub mod emq;
pub mod error;
pub mod histogram;
pub mod logspace;
pub mod noise;
pub mod quantile;
pub mod sparse_vector;

pub use accounting::{guarantee_for, NeighborModel, PrivacyGuarantee, QueryClass};
pub use aggregates::{dp_mean, dp_sum, ClipMethod, SumConfig, SumEstimate};
pub use emq::{emq_estimate, BoundedRange};
pub use error::{DpError, Result};
pub use histogram::LogBucketHistogram;
pub use noise::{NoiseKind, NoiseSpec, RandomSource};
pub use quantile::{
    estimate_multiple_quantiles, estimate_quantile, estimate_quantile_unbounded, Dataset, QuantileEstimate,
    QuantileRequest,
};
pub use sparse_vector::{run_above_threshold, QueryStream, SvtConfig, SvtOutcome};
