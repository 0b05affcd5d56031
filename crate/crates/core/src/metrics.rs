//! Ensemble comparison: power spectrum distance and marginal histogram distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{common_shape, ordered_sum, Field};
use crate::fourier;

pub const HIST_RANGE: (f64, f64) = (-3.0, 3.0);
pub const HIST_BINS: usize = 61;

/// Mean periodogram `|x̂(ω)|² / d` in FFT order.
pub fn estimate_spectrum(samples: &[Field]) -> Result<Vec<f64>> {
    let (side, dims) = common_shape(samples)?;
    let d = side.pow(dims as u32);
    let sum = ordered_sum(samples.len(), d, |i, acc| {
        for (a, c) in acc.iter_mut().zip(fourier::fft(samples[i].as_slice(), side, dims)) {
            *a += c.norm_sqr();
        }
    });
    let scale = 1.0 / (samples.len() * d) as f64;
    Ok(sum.into_iter().map(|s| s * scale).collect())
}

/// Normalized histogram on fixed edges. Values outside the range are
/// counted in the nearest edge bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    edges: Vec<f64>,
    masses: Vec<f64>,
}

impl Histogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::config(format!("invalid histogram range [{lo}, {hi}] with {bins} bins")));
        }
        if values.is_empty() {
            return Err(Error::config("histogram of an empty sample"));
        }
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|k| lo + k as f64 * width).collect();
        let mut counts = vec![0u64; bins];
        for v in values {
            let k = ((v - lo) / width).floor();
            let k = if k.is_nan() { continue } else { k.clamp(0.0, (bins - 1) as f64) as usize };
            counts[k] += 1;
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::config("histogram sample has no finite values"));
        }
        let masses = counts.iter().map(|c| *c as f64 / total as f64).collect();
        Ok(Histogram { edges, masses })
    }

    /// 61 bins over `[-3, 3]`.
    pub fn standard(values: &[f64]) -> Self {
        Self::new(values, HIST_RANGE.0, HIST_RANGE.1, HIST_BINS).expect("non-empty sample")
    }

    pub fn of_fields(fields: &[Field], bins: usize) -> Result<Self> {
        let values: Vec<f64> = fields.iter().flat_map(|f| f.as_slice().iter().copied()).collect();
        Self::new(&values, HIST_RANGE.0, HIST_RANGE.1, bins)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }
}

/// Squared L² distance between spectra over the frequency grid.
pub fn d1(p: &[f64], p_hat: &[f64]) -> Result<f64> {
    if p.len() != p_hat.len() {
        return Err(Error::shape(format!("spectra of length {} and {}", p.len(), p_hat.len())));
    }
    Ok(p.iter().zip(p_hat).map(|(a, b)| (a - b).powi(2)).sum())
}

/// Total variation between histograms on shared edges.
pub fn d2_marginal_tv(a: &Histogram, b: &Histogram) -> Result<f64> {
    if a.edges != b.edges {
        return Err(Error::shape("histograms do not share bin edges"));
    }
    Ok(0.5 * a.masses.iter().zip(&b.masses).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub spectrum_hat: Vec<f64>,
    pub marginal_hist: Histogram,
    pub sample_count: usize,
}

impl EnsembleSummary {
    pub fn of(samples: &[Field], bins: usize) -> Result<Self> {
        Ok(EnsembleSummary {
            spectrum_hat: estimate_spectrum(samples)?,
            marginal_hist: Histogram::of_fields(samples, bins)?,
            sample_count: samples.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombinedError {
    pub d1: f64,
    pub d2: f64,
}

impl CombinedError {
    pub fn total(&self) -> f64 {
        self.d1 + self.d2
    }
}

/// `D₁ + D₂` of a generated ensemble: spectrum against `p`, marginal
/// histogram against the reference ensemble.
pub fn combined_error(p: &[f64], generated: &[Field], reference: &[Field]) -> Result<CombinedError> {
    let gen = EnsembleSummary::of(generated, HIST_BINS)?;
    let hist_ref = Histogram::of_fields(reference, HIST_BINS)?;
    Ok(CombinedError { d1: d1(p, &gen.spectrum_hat)?, d2: d2_marginal_tv(&gen.marginal_hist, &hist_ref)? })
}

/// Self-distance between the two halves of an ensemble, a floor for
/// `combined_error` at this sample size.
pub fn split_half_floor(samples: &[Field]) -> Result<CombinedError> {
    if samples.len() < 2 {
        return Err(Error::config("split-half floor needs at least two samples"));
    }
    let (a, b) = samples.split_at(samples.len() / 2);
    combined_error(&estimate_spectrum(a)?, b, a)
}
