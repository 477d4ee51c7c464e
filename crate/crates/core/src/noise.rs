//! Noise distributions used by AboveThreshold and the clipped-sum release.
//!
//! All three distributions are sampled by inverse CDF from a single uniform
//! draw on an open interval, so every call consumes exactly one 64-bit word
//! from the [`RandomSource`]. Replaying a `(seed, stream)` pair replays the
//! sample sequence bit for bit.

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, require_positive, DpError, Result};

/// 2^-53, the spacing of the uniform grid.
const UNIT: f64 = 1.0 / (1u64 << 53) as f64;

/// Seedable, splittable randomness.
///
/// Each `(seed, stream)` pair selects an independent ChaCha keystream, so
/// parallel trials can own disjoint streams and still be replayed exactly.
/// Not `Sync`: one thread per source.
#[derive(Clone, Debug)]
pub struct RandomSource {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Derive the source for another stream under the same seed.
    pub fn fork(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    /// Uniform draw on the open interval (0, 1).
    pub fn open_unit(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * UNIT
    }

    /// Uniform draw on the open interval (-1, 1). Never returns 0 or ±1.
    pub fn open_symmetric(&mut self) -> f64 {
        let k = (self.rng.next_u64() >> 11) as f64;
        (2.0 * k + 1.0) * UNIT - 1.0
    }

    /// Uniform draw on [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.rng.next_u64() >> 11) as f64 * UNIT;
        lo + (hi - lo) * u
    }

    /// Uniform integer in `0..n`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire's widening multiply; bias is < n / 2^64.
        ((self.rng.next_u64() as u128 * n as u128) >> 64) as usize
    }
}

impl RngCore for RandomSource {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Laplace,
    Gumbel,
    #[serde(alias = "expo")]
    Exponential,
}

impl Default for NoiseKind {
    /// Exponential noise has the lowest variance at a given scale.
    fn default() -> Self {
        NoiseKind::Exponential
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::Laplace => "laplace",
            NoiseKind::Gumbel => "gumbel",
            NoiseKind::Exponential => "expo",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = DpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "laplace" | "lap" => Ok(NoiseKind::Laplace),
            "gumbel" => Ok(NoiseKind::Gumbel),
            "expo" | "exponential" | "exp" => Ok(NoiseKind::Exponential),
            other => Err(invalid("noise", format!("unknown noise kind `{other}`"))),
        }
    }
}

/// A noise distribution together with its scale `b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    kind: NoiseKind,
    scale: f64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, scale: f64) -> Result<Self> {
        require_positive("scale", scale)?;
        Ok(Self { kind, scale })
    }

    pub fn laplace(scale: f64) -> Result<Self> {
        Self::new(NoiseKind::Laplace, scale)
    }

    pub fn gumbel(scale: f64) -> Result<Self> {
        Self::new(NoiseKind::Gumbel, scale)
    }

    pub fn exponential(scale: f64) -> Result<Self> {
        Self::new(NoiseKind::Exponential, scale)
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    #[inline]
    pub fn sample(&self, rng: &mut RandomSource) -> f64 {
        let b = self.scale;
        match self.kind {
            NoiseKind::Laplace => {
                let u = rng.open_symmetric();
                -b * u.signum() * (-u.abs()).ln_1p()
            }
            NoiseKind::Gumbel => -b * (-rng.open_unit().ln()).ln(),
            NoiseKind::Exponential => -b * rng.open_unit().ln(),
        }
    }

    pub fn pdf(&self, z: f64) -> f64 {
        let b = self.scale;
        match self.kind {
            NoiseKind::Laplace => (-z.abs() / b).exp() / (2.0 * b),
            NoiseKind::Gumbel => {
                let t = z / b;
                (-(t + (-t).exp())).exp() / b
            }
            NoiseKind::Exponential => {
                if z < 0.0 {
                    0.0
                } else {
                    (-z / b).exp() / b
                }
            }
        }
    }

    /// Analytic mean of the distribution.
    pub fn mean(&self) -> f64 {
        match self.kind {
            NoiseKind::Laplace => 0.0,
            NoiseKind::Gumbel => self.scale * EULER_MASCHERONI,
            NoiseKind::Exponential => self.scale,
        }
    }
}

pub const EULER_MASCHERONI: f64 = 0.577_215_664_901_532_9;
