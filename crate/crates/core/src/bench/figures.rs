//! Density curves contrasting EMQ under a loose range with UQE.

use serde::{Deserialize, Serialize};

use crate::emq::{emq_pdf, BoundedRange, StepPdf};
use crate::error::{invalid, Result};
use crate::histogram::LogBucketHistogram;
use crate::noise::RandomSource;
use crate::quantile::uqe_pdf_steps;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdfFigure {
    pub range: BoundedRange,
    pub emq: StepPdf,
    pub uqe: StepPdf,
    /// EMQ mass on `[x_max, b]`.
    pub emq_top_mass: f64,
    /// UQE mass not drawn because the search went past the plotted horizon.
    pub uqe_residual: f64,
}

/// EMQ and UQE step densities for one declared range.
///
/// `eps` is the total budget of each method; UQE runs Gumbel AboveThreshold
/// with `ε₁ = ε₂ = eps/2` and its lower bound at the range's lower end. The
/// UQE curve is cut at a horizon that depends only on the data, so widening
/// the upper end of the range leaves it untouched.
pub fn emit_pdf_figures(data: &[f64], range: &BoundedRange, q: f64, eps: f64, beta: f64) -> Result<PdfFigure> {
    let emq = emq_pdf(data, range, q, eps)?;
    let emq_top_mass = emq.steps().last().map_or(0.0, |s| s.mass);
    let ell = range.lo();
    let hist = LogBucketHistogram::build(data, beta, ell)?;
    let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let horizon = ell + 2.0 * (max - ell + 1.0);
    let uqe = uqe_pdf_steps(&hist, q, eps / 2.0, horizon)?;
    let uqe_residual = (1.0 - uqe.total_mass()).max(0.0);
    Ok(PdfFigure {
        range: *range,
        emq,
        uqe,
        emq_top_mass,
        uqe_residual,
    })
}

/// Evenly spaced grid over the range, endpoints included.
pub fn plot_grid(range: &BoundedRange, points: usize) -> Vec<f64> {
    let points = points.max(2);
    let step = range.width() / (points - 1) as f64;
    (0..points).map(|i| range.lo() + step * i as f64).collect()
}

/// CSV with header `value,emq,uqe`.
pub fn figure_csv(fig: &PdfFigure, points: usize) -> String {
    let mut out = String::from("value,emq,uqe\n");
    for x in plot_grid(&fig.range, points) {
        out.push_str(&format!("{x},{},{}\n", fig.emq.density_at(x), fig.uqe.density_at(x)));
    }
    out
}

/// A handful of points uniform on [0, 10].
pub fn illustration_data(n: usize, rng: &mut RandomSource) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(0.0, 10.0)).collect()
}

/// The same data plotted under ranges [0, 10] and [0, 20].
pub fn range_contrast(data: &[f64], q: f64, eps: f64, beta: f64) -> Result<[PdfFigure; 2]> {
    if data.iter().any(|&x| !(0.0..=10.0).contains(&x)) {
        return Err(invalid("data", "contrast figures need data in [0, 10]"));
    }
    let tight = BoundedRange::new(0.0, 10.0)?;
    let loose = BoundedRange::new(0.0, 20.0)?;
    if !(q > 0.0 && q < 1.0) {
        return Err(invalid("q", "must lie in (0, 1)"));
    }
    Ok([
        emit_pdf_figures(data, &tight, q, eps, beta)?,
        emit_pdf_figures(data, &loose, q, eps, beta)?,
    ])
}
