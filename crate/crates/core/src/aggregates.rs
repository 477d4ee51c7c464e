//! Clipped sum and mean with a privately chosen clipping bound.
//!
//! Stage one spends `ε` on a private high quantile `Δ`; stage two releases
//! `Σ min(x, Δ) + Lap(Δ/ε)`. The whole procedure is `2ε`-DP.

use serde::{Deserialize, Serialize};

use crate::accounting::PrivacyGuarantee;
use crate::emq::{emq_estimate, BoundedRange};
use crate::error::{invalid, require_positive, DpError, Result};
use crate::histogram::LogBucketHistogram;
use crate::noise::{NoiseKind, NoiseSpec, RandomSource};
use crate::quantile::{estimate_with_threshold, QuantileRequest, CLIPPING_BETA};

/// Smallest clip, as a fraction of the method's scale, when the private
/// estimate is not positive.
pub const CLIP_FLOOR_FRACTION: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum ClipMethod {
    Uqe { beta: f64, noise: NoiseKind },
    Emq { range: BoundedRange },
}

impl Default for ClipMethod {
    fn default() -> Self {
        ClipMethod::Uqe {
            beta: CLIPPING_BETA,
            noise: NoiseKind::Exponential,
        }
    }
}

/// Which count the UQE clip search waits for.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipThreshold {
    /// `q·n`.
    #[default]
    Quantile,
    /// `n`: push the clip toward the maximum.
    N,
    /// `n + 1/ε`: push further still, trading variance for less bias.
    NPlusInvEps,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SumConfig {
    pub q: f64,
    /// Budget of each stage.
    pub eps: f64,
    pub method: ClipMethod,
    pub threshold: ClipThreshold,
}

impl SumConfig {
    pub fn new(eps: f64) -> Self {
        Self {
            q: 0.99,
            eps,
            method: ClipMethod::default(),
            threshold: ClipThreshold::Quantile,
        }
    }

    pub fn with_q(mut self, q: f64) -> Self {
        self.q = q;
        self
    }

    pub fn with_method(mut self, method: ClipMethod) -> Self {
        self.method = method;
        self
    }

    pub fn with_threshold(mut self, threshold: ClipThreshold) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(invalid("q", format!("must lie in (0, 1], got {}", self.q)));
        }
        require_positive("eps", self.eps)?;
        if let ClipMethod::Uqe { beta, .. } = self.method {
            if !(beta > 1.0 && beta.is_finite()) {
                return Err(invalid("beta", format!("must exceed 1, got {beta}")));
            }
        }
        Ok(())
    }

    /// Quantile stage plus Laplace stage.
    pub fn guarantee(&self) -> PrivacyGuarantee {
        PrivacyGuarantee::pure_dp(self.eps).compose(&PrivacyGuarantee::pure_dp(self.eps))
    }

    fn quantile_request(&self, beta: f64, noise: NoiseKind) -> Result<QuantileRequest> {
        QuantileRequest::new(self.q, self.eps).map(|r| r.with_beta(beta).with_noise(noise))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SumEstimate {
    pub estimate: f64,
    pub clip: f64,
    pub epsilon_total: f64,
    /// The private clip came out nonpositive and was raised to the floor.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clip_clamped: bool,
}

fn check_nonnegative(data: &[f64]) -> Result<()> {
    if data.is_empty() {
        return Err(DpError::EmptyDataset);
    }
    for (index, &value) in data.iter().enumerate() {
        if !value.is_finite() {
            return Err(DpError::NonFinite(index));
        }
        if value < 0.0 {
            return Err(DpError::BelowLowerBound {
                index,
                value,
                lower: 0.0,
            });
        }
    }
    Ok(())
}

/// `Σ min(x, clip)`.
pub fn clipped_sum(data: &[f64], clip: f64) -> f64 {
    data.iter().map(|&x| x.min(clip)).sum()
}

/// Laplace stage alone, for a clip chosen elsewhere.
pub fn dp_sum_with_clip(data: &[f64], clip: f64, eps: f64, rng: &mut RandomSource) -> Result<f64> {
    require_positive("clip", clip)?;
    require_positive("eps", eps)?;
    let noise = NoiseSpec::laplace(clip / eps)?;
    Ok(clipped_sum(data, clip) + noise.sample(rng))
}

/// Private clipping bound: `(clip, clamped)`.
pub fn private_clip(data: &[f64], cfg: &SumConfig, rng: &mut RandomSource) -> Result<(f64, bool)> {
    cfg.validate()?;
    check_nonnegative(data)?;
    let (raw, scale) = match cfg.method {
        ClipMethod::Uqe { beta, noise } => {
            let req = cfg.quantile_request(beta, noise)?;
            let hist = LogBucketHistogram::build(data, beta, 0.0)?;
            let n = data.len() as f64;
            let threshold = match cfg.threshold {
                ClipThreshold::Quantile => cfg.q * n,
                ClipThreshold::N => n,
                ClipThreshold::NPlusInvEps => n + 1.0 / req.eps1,
            };
            let est = estimate_with_threshold(&hist, threshold, &req, rng)?;
            (est.value, est.value.abs().max(1.0))
        }
        ClipMethod::Emq { range } => (emq_estimate(data, &range, cfg.q, cfg.eps, rng)?, range.width()),
    };
    if raw > 0.0 {
        Ok((raw, false))
    } else {
        Ok((scale * CLIP_FLOOR_FRACTION, true))
    }
}

/// `2ε`-DP sum of nonnegative data.
pub fn dp_sum(data: &[f64], cfg: &SumConfig, rng: &mut RandomSource) -> Result<SumEstimate> {
    let (clip, clip_clamped) = private_clip(data, cfg, rng)?;
    let estimate = dp_sum_with_clip(data, clip, cfg.eps, rng)?;
    Ok(SumEstimate {
        estimate,
        clip,
        epsilon_total: cfg.guarantee().eps_dp.expect("pure DP composes"),
        clip_clamped,
    })
}

/// `dp_sum / n`; `n` is public under swap neighbors.
pub fn dp_mean(data: &[f64], cfg: &SumConfig, rng: &mut RandomSource) -> Result<SumEstimate> {
    let sum = dp_sum(data, cfg, rng)?;
    Ok(SumEstimate {
        estimate: sum.estimate / data.len() as f64,
        ..sum
    })
}
