//! Exponential-mechanism quantile baseline (EMQ) over a bounded range.
//!
//! The sorted data cut `[a, b]` into `n + 1` intervals; interval `j` (between
//! the `j`-th and `(j+1)`-th order statistics, with `a` and `b` at the ends)
//! is chosen with weight `exp(-ε|j - qn|/2) · length` and the output is
//! uniform inside it.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, require_positive, require_unit_interval, DpError, Result};
use crate::logspace::log_sum_exp;
use crate::noise::{NoiseSpec, RandomSource};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundedRange {
    a: f64,
    b: f64,
}

impl BoundedRange {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(invalid("range", format!("need finite a < b, got [{a}, {b}]")));
        }
        Ok(Self { a, b })
    }

    pub fn lo(&self) -> f64 {
        self.a
    }

    pub fn hi(&self) -> f64 {
        self.b
    }

    pub fn width(&self) -> f64 {
        self.b - self.a
    }

    pub fn contains(&self, x: f64) -> bool {
        self.a <= x && x <= self.b
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.a, self.b)
    }
}

/// One step of a piecewise-constant density: `mass` spread over `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdfStep {
    pub lo: f64,
    pub hi: f64,
    pub mass: f64,
}

impl PdfStep {
    pub fn density(&self) -> f64 {
        let width = self.hi - self.lo;
        if width > 0.0 {
            self.mass / width
        } else {
            0.0
        }
    }
}

/// Step-function density with non-overlapping steps in ascending order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepPdf {
    steps: Vec<PdfStep>,
}

impl StepPdf {
    pub fn new(steps: Vec<PdfStep>) -> Self {
        Self { steps }
    }

    pub fn steps(&self) -> &[PdfStep] {
        &self.steps
    }

    pub fn total_mass(&self) -> f64 {
        self.steps.iter().map(|s| s.mass).sum()
    }

    /// Density at `x`; steps are half-open `[lo, hi)` except the last.
    pub fn density_at(&self, x: f64) -> f64 {
        let idx = self.steps.partition_point(|s| s.hi <= x);
        match self.steps.get(idx) {
            Some(s) if s.lo <= x => s.density(),
            None => match self.steps.last() {
                Some(s) if x == s.hi => s.density(),
                _ => 0.0,
            },
            _ => 0.0,
        }
    }

    /// `(x, density)` pairs for plotting.
    pub fn sample(&self, grid: &[f64]) -> Vec<(f64, f64)> {
        grid.iter().map(|&x| (x, self.density_at(x))).collect()
    }

    /// CSV with header `value,density`.
    pub fn to_csv(&self, grid: &[f64]) -> String {
        let mut out = String::from("value,density\n");
        for (x, d) in self.sample(grid) {
            out.push_str(&format!("{x},{d}\n"));
        }
        out
    }
}

fn sorted_within(data: &[f64], range: &BoundedRange) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(DpError::EmptyDataset);
    }
    for (index, &value) in data.iter().enumerate() {
        if !value.is_finite() {
            return Err(DpError::NonFinite(index));
        }
        if !range.contains(value) {
            return Err(DpError::OutOfRange {
                index,
                value,
                lo: range.a,
                hi: range.b,
            });
        }
    }
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted)
}

/// Interval endpoints `a, x_(1), ..., x_(n), b`.
fn edges(sorted: &[f64], range: &BoundedRange) -> Vec<f64> {
    let mut e = Vec::with_capacity(sorted.len() + 2);
    e.push(range.a);
    e.extend_from_slice(sorted);
    e.push(range.b);
    e
}

fn log_weights(edges: &[f64], q: f64, eps: f64) -> Vec<f64> {
    let n = (edges.len() - 2) as f64;
    let target = q * n;
    edges
        .windows(2)
        .enumerate()
        .map(|(j, w)| {
            let gap = w[1] - w[0];
            if gap > 0.0 {
                -eps * (j as f64 - target).abs() / 2.0 + gap.ln()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}

fn check_params(q: f64, eps: f64) -> Result<()> {
    require_unit_interval("q", q)?;
    require_positive("eps", eps)
}

/// Exact selection probability of each interval `j = 0..=n`.
pub fn emq_interval_pmf(data: &[f64], range: &BoundedRange, q: f64, eps: f64) -> Result<Vec<f64>> {
    check_params(q, eps)?;
    let sorted = sorted_within(data, range)?;
    let lw = log_weights(&edges(&sorted, range), q, eps);
    let norm = log_sum_exp(&lw);
    Ok(lw.into_iter().map(|w| (w - norm).exp()).collect())
}

/// Private `q`-quantile drawn from the EMQ distribution.
pub fn emq_estimate(data: &[f64], range: &BoundedRange, q: f64, eps: f64, rng: &mut RandomSource) -> Result<f64> {
    check_params(q, eps)?;
    let sorted = sorted_within(data, range)?;
    let edges = edges(&sorted, range);
    let lw = log_weights(&edges, q, eps);
    // Gumbel-max over log-weights: exact in distribution and immune to
    // underflow of the unnormalized weights.
    let gumbel = NoiseSpec::gumbel(1.0).expect("unit scale");
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (j, &w) in lw.iter().enumerate() {
        if w == f64::NEG_INFINITY {
            continue;
        }
        let score = w + gumbel.sample(rng);
        if score > best.0 {
            best = (score, j);
        }
    }
    let j = best.1;
    Ok(rng.uniform(edges[j], edges[j + 1]))
}

/// Step density of the EMQ output on `[a, b]`.
pub fn emq_pdf(data: &[f64], range: &BoundedRange, q: f64, eps: f64) -> Result<StepPdf> {
    let pmf = emq_interval_pmf(data, range, q, eps)?;
    let sorted = sorted_within(data, range)?;
    let edges = edges(&sorted, range);
    let steps = pmf
        .into_iter()
        .enumerate()
        .map(|(j, mass)| PdfStep {
            lo: edges[j],
            hi: edges[j + 1],
            mass,
        })
        .collect();
    Ok(StepPdf::new(steps))
}

/// EMQ density sampled on `grid` (every point must lie in the range).
pub fn emq_pdf_curve(data: &[f64], range: &BoundedRange, q: f64, eps: f64, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if let Some(&x) = grid.iter().find(|&&x| !range.contains(x)) {
        return Err(invalid("grid", format!("point {x} outside the range")));
    }
    Ok(emq_pdf(data, range, q, eps)?.sample(grid))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct weight table: exp(-ε|j - qn|/2)·gap, normalized by its sum.
    fn enumerate(data: &[f64], a: f64, b: f64, q: f64, eps: f64) -> Vec<f64> {
        let mut xs = data.to_vec();
        xs.sort_by(|p, r| p.partial_cmp(r).unwrap());
        let n = xs.len();
        let mut pts = vec![a];
        pts.extend(xs);
        pts.push(b);
        let w: Vec<f64> = (0..=n)
            .map(|j| (-eps * (j as f64 - q * n as f64).abs() / 2.0).exp() * (pts[j + 1] - pts[j]))
            .collect();
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    }

    #[test]
    fn singleton_is_symmetric() {
        let r = BoundedRange::new(0.0, 10.0).unwrap();
        let p = emq_interval_pmf(&[5.0], &r, 0.5, 1.0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn matches_enumeration() {
        let r = BoundedRange::new(0.0, 10.0).unwrap();
        let p = emq_interval_pmf(&[3.0, 1.0, 2.0], &r, 0.5, 1.0).unwrap();
        let e = enumerate(&[1.0, 2.0, 3.0], 0.0, 10.0, 0.5, 1.0);
        for (x, y) in p.iter().zip(&e) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicates_have_zero_weight() {
        let r = BoundedRange::new(0.0, 10.0).unwrap();
        let p = emq_interval_pmf(&[4.0, 4.0, 6.0], &r, 0.5, 1.0).unwrap();
        assert_eq!(p[1], 0.0);
        let mut rng = RandomSource::new(2, 0);
        for _ in 0..10_000 {
            let x = emq_estimate(&[4.0, 4.0, 6.0], &r, 0.5, 1.0, &mut rng).unwrap();
            assert!(r.contains(x));
        }
    }

    #[test]
    fn looser_upper_bound_inflates_top_interval() {
        let data = [1.0, 2.5, 4.0, 6.0, 7.5, 9.0];
        let tight = emq_interval_pmf(&data, &BoundedRange::new(0.0, 10.0).unwrap(), 0.9, 1.0).unwrap();
        let loose = emq_interval_pmf(&data, &BoundedRange::new(0.0, 20.0).unwrap(), 0.9, 1.0).unwrap();
        assert!(loose[6] > tight[6]);
    }

    #[test]
    fn large_n_does_not_underflow() {
        let data: Vec<f64> = (0..5000).map(|i| i as f64 / 5000.0).collect();
        let r = BoundedRange::new(0.0, 1.0).unwrap();
        let p = emq_interval_pmf(&data, &r, 0.99, 1.0).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn geometric_decay_with_equal_gaps() {
        let data: Vec<f64> = (1..=9).map(f64::from).collect();
        let r = BoundedRange::new(0.0, 10.0).unwrap();
        let p = emq_interval_pmf(&data, &r, 0.5, 1.0).unwrap();
        // qn = 4.5; moving one rank away multiplies mass by e^{-1/2}.
        for j in 5..9 {
            assert!((p[j + 1] / p[j] - (-0.5f64).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn pdf_integrates_to_one() {
        let r = BoundedRange::new(0.0, 10.0).unwrap();
        let pdf = emq_pdf(&[2.0, 3.0, 7.0], &r, 0.9, 1.0).unwrap();
        let integral: f64 = pdf.steps().iter().map(|s| s.density() * (s.hi - s.lo)).sum();
        assert!((integral - 1.0).abs() < 1e-9);
        assert!(pdf.density_at(10.0) > 0.0);
        assert_eq!(pdf.density_at(11.0), 0.0);
        assert!(emq_pdf_curve(&[2.0], &r, 0.5, 1.0, &[11.0]).is_err());
    }

    #[test]
    fn rejects_data_outside_range() {
        let r = BoundedRange::new(0.0, 10.0).unwrap();
        assert!(matches!(
            emq_interval_pmf(&[11.0], &r, 0.5, 1.0),
            Err(DpError::OutOfRange { index: 0, .. })
        ));
        assert!(BoundedRange::new(1.0, 1.0).is_err());
    }
}
