//! Periodic stationary Gaussian fields described by their power spectrum.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{check_dims, Field};
use crate::fourier;
use crate::wavelet::{self, FilterPair, NormalizerSet, DENSE_CAP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectrumNormalization {
    /// `c = 1`.
    Raw,
    /// `c` chosen so that `Tr(Σ) = d`.
    TraceD,
}

/// Power-law spectrum `P(ω) = c / (ξ^η + |ω|^η)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSpec {
    pub eta: f64,
    pub xi: f64,
    pub side: usize,
    pub dims: usize,
    pub normalization: SpectrumNormalization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryGaussian {
    side: usize,
    dims: usize,
    /// Covariance eigenvalues in FFT order.
    spectrum: Vec<f64>,
    mean: f64,
}

impl StationaryGaussian {
    pub fn new(side: usize, dims: usize, spectrum: Vec<f64>, mean: f64) -> Result<Self> {
        check_dims(dims)?;
        let d = side.pow(dims as u32);
        if spectrum.len() != d {
            return Err(Error::shape(format!("spectrum needs {d} values, got {}", spectrum.len())));
        }
        if let Some(p) = spectrum.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(Error::domain(format!("spectrum entries must be positive and finite, found {p}")));
        }
        let scale = spectrum.iter().cloned().fold(0.0, f64::max);
        for (i, p) in spectrum.iter().enumerate() {
            let q = spectrum[fourier::negated_index(i, side, dims)];
            if (p - q).abs() > 1e-12 * scale {
                return Err(Error::domain("spectrum is not symmetric under ω → -ω"));
            }
        }
        if !mean.is_finite() {
            return Err(Error::domain("mean must be finite"));
        }
        Ok(StationaryGaussian { side, dims, spectrum, mean })
    }

    /// White field with unit spectrum.
    pub fn white(side: usize, dims: usize) -> Self {
        StationaryGaussian { side, dims, spectrum: vec![1.0; side.pow(dims as u32)], mean: 0.0 }
    }

    pub fn with_mean(mut self, mean: f64) -> Result<Self> {
        if !mean.is_finite() {
            return Err(Error::domain("mean must be finite"));
        }
        self.mean = mean;
        Ok(self)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn dim(&self) -> usize {
        self.spectrum.len()
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }
}

pub fn build_spectrum(spec: &SpectrumSpec) -> Result<StationaryGaussian> {
    check_dims(spec.dims)?;
    if !(spec.eta > 0.0 && spec.eta.is_finite()) {
        return Err(Error::config(format!("spectrum exponent must be positive, got {}", spec.eta)));
    }
    if !(spec.xi > 0.0 && spec.xi.is_finite()) {
        return Err(Error::config(format!("inverse correlation length must be positive, got {}", spec.xi)));
    }
    if spec.side == 0 {
        return Err(Error::config("side must be positive"));
    }
    let floor = spec.xi.powf(spec.eta);
    let mut p: Vec<f64> =
        fourier::frequency_norms(spec.side, spec.dims).iter().map(|w| 1.0 / (floor + w.powf(spec.eta))).collect();
    if spec.normalization == SpectrumNormalization::TraceD {
        let c = p.len() as f64 / p.iter().sum::<f64>();
        p.iter_mut().for_each(|v| *v *= c);
    }
    StationaryGaussian::new(spec.side, spec.dims, p, 0.0)
}

/// Draw `count` fields by coloring Hermitian-symmetric complex white noise.
pub fn sample<R: Rng + ?Sized>(g: &StationaryGaussian, rng: &mut R, count: usize) -> Vec<Field> {
    let (side, dims, d) = (g.side, g.dims, g.dim());
    let amp: Vec<f64> = g.spectrum.iter().map(|p| p.sqrt()).collect();
    let norm = 1.0 / (d as f64).sqrt();
    (0..count)
        .map(|_| {
            let mut z = vec![Complex64::new(0.0, 0.0); d];
            for i in 0..d {
                let j = fourier::negated_index(i, side, dims);
                if j == i {
                    z[i] = Complex64::new(rng.sample::<f64, _>(StandardNormal) * amp[i], 0.0);
                } else if i < j {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    let c = Complex64::new(re, im) * (amp[i] * std::f64::consts::FRAC_1_SQRT_2);
                    z[i] = c;
                    z[j] = c.conj();
                }
            }
            fourier::ifft(&mut z, side, dims);
            let data = z.iter().map(|c| c.re * norm + g.mean).collect();
            Field::new(side, dims, data).expect("shape fixed by the spectrum")
        })
        .collect()
}

pub fn condition_number_of(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::domain("no eigenvalues"));
    }
    if let Some(v) = values.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::domain(format!("non-positive eigenvalue {v}")));
    }
    let max = values.iter().cloned().fold(f64::MIN, f64::max);
    let min = values.iter().cloned().fold(f64::MAX, f64::min);
    Ok(max / min)
}

pub fn condition_number(g: &StationaryGaussian) -> Result<f64> {
    condition_number_of(&g.spectrum)
}

/// Variance of each Fourier mode of `x_t` under the forward noising.
pub fn noised_spectrum(spectrum: &[f64], t: f64) -> Vec<f64> {
    let a = (-2.0 * t).exp();
    spectrum.iter().map(|p| a * p + 1.0 - a).collect()
}

/// Exact score of the noised marginal at time `t`, on a raw buffer.
pub fn score_exact_slice(g: &StationaryGaussian, t: f64, x: &[f64]) -> Vec<f64> {
    let shift = (-t).exp() * g.mean;
    let centered: Vec<f64> = x.iter().map(|v| v - shift).collect();
    let mult: Vec<f64> = noised_spectrum(&g.spectrum, t).iter().map(|s| -1.0 / s).collect();
    fourier::apply_multiplier(&centered, g.side, g.dims, &mult)
}

pub fn score_exact(g: &StationaryGaussian, t: f64, x: &Field) -> Result<Field> {
    if x.side() != g.side || x.dims() != g.dims {
        return Err(Error::shape("field shape does not match the spectrum"));
    }
    if !(t >= 0.0) {
        return Err(Error::domain("diffusion time must be non-negative"));
    }
    Field::new(g.side, g.dims, score_exact_slice(g, t, x.as_slice()))
}

fn check_dense(d: usize) -> Result<()> {
    if d > DENSE_CAP {
        return Err(Error::resource(format!("dense covariance of size {d} exceeds the cap {DENSE_CAP}")));
    }
    Ok(())
}

/// Circulant covariance `Σ` in the pixel basis.
pub fn dense_covariance(g: &StationaryGaussian) -> Result<DMatrix<f64>> {
    let d = g.dim();
    check_dense(d)?;
    let (side, dims) = (g.side, g.dims);
    let mut buf: Vec<Complex64> = g.spectrum.iter().map(|p| Complex64::new(*p, 0.0)).collect();
    fourier::ifft(&mut buf, side, dims);
    let c: Vec<f64> = buf.iter().map(|z| z.re / d as f64).collect();
    let lag = |u: usize, v: usize| -> usize {
        match dims {
            1 => (u + side - v) % side,
            _ => {
                let (a, b) = ((u / side + side - v / side) % side, (u % side + side - v % side) % side);
                a * side + b
            }
        }
    };
    Ok(DMatrix::from_fn(d, d, |u, v| c[lag(u, v)]))
}

/// Exact distribution of the normalized detail coefficients given the
/// normalized low-pass field at the first scale: `x̄_1 | x_1 ~ N(A x_1, Γ)`.
#[derive(Debug, Clone)]
pub struct ConditionalGaussian {
    pub a: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub var_low: DMatrix<f64>,
    pub var_detail: DMatrix<f64>,
    pub cov_detail_low: DMatrix<f64>,
    pub normalizer: f64,
}

impl ConditionalGaussian {
    /// Joint covariance of `(x̄_1, x_1)` rebuilt from `(A, Γ, Var(x_1))`.
    pub fn joint_covariance(&self) -> DMatrix<f64> {
        let cov = &self.a * &self.var_low;
        joint_blocks(&(&self.gamma + &cov * self.a.transpose()), &cov, &self.var_low)
    }
}

/// Assemble `[[Var(x̄), Cov(x̄, x)], [Cov(x, x̄), Var(x)]]`.
pub fn joint_blocks(var_detail: &DMatrix<f64>, cov_detail_low: &DMatrix<f64>, var_low: &DMatrix<f64>) -> DMatrix<f64> {
    let (nd, nl) = (var_detail.nrows(), var_low.nrows());
    let mut j = DMatrix::zeros(nd + nl, nd + nl);
    j.view_mut((0, 0), (nd, nd)).copy_from(var_detail);
    j.view_mut((0, nd), (nd, nl)).copy_from(cov_detail_low);
    j.view_mut((nd, 0), (nl, nd)).copy_from(&cov_detail_low.transpose());
    j.view_mut((nd, nd), (nl, nl)).copy_from(var_low);
    j
}

pub fn conditional_gaussian(g: &StationaryGaussian, f: &FilterPair, gamma1: f64) -> Result<ConditionalGaussian> {
    if !(gamma1 > 0.0) {
        return Err(Error::domain("normalizer must be positive"));
    }
    let (gm, hm) = wavelet::operator_matrices(f, g.side, g.dims)?;
    let sigma = dense_covariance(g)?;
    let s = 1.0 / (gamma1 * gamma1);
    let var_low = (&gm * &sigma * gm.transpose()) * s;
    let var_detail = (&hm * &sigma * hm.transpose()) * s;
    let cov_detail_low = (&hm * &sigma * gm.transpose()) * s;
    let chol = var_low.clone().cholesky().ok_or_else(|| Error::domain("low-pass covariance is singular"))?;
    // A = Cov(x̄, x) Var(x)^{-1}; solve Var(x) Aᵀ = Cov(x, x̄).
    let a = chol.solve(&cov_detail_low.transpose()).transpose();
    let mut gamma = &var_detail - &a * cov_detail_low.transpose();
    gamma = (&gamma + gamma.transpose()) * 0.5;
    Ok(ConditionalGaussian { a, gamma, var_low, var_detail, cov_detail_low, normalizer: gamma1 })
}

/// Normalized covariance of the full coefficient vector
/// `(x̄_1, ..., x̄_J, x_J)`, rescaled to unit diagonal.
pub fn wavelet_covariance(g: &StationaryGaussian, f: &FilterPair, scales: usize) -> Result<DMatrix<f64>> {
    check_dense(g.dim())?;
    let w = wavelet::full_transform_matrix(f, g.side, g.dims, &NormalizerSet::identity(scales))?;
    let sigma = dense_covariance(g)?;
    let sw = &w * sigma * w.transpose();
    let dinv: Vec<f64> = (0..sw.nrows()).map(|i| 1.0 / sw[(i, i)].sqrt()).collect();
    let mut out = DMatrix::from_fn(sw.nrows(), sw.ncols(), |i, j| sw[(i, j)] * dinv[i] * dinv[j]);
    out = (&out + out.transpose()) * 0.5;
    Ok(out)
}

/// Squared magnitude response of the detail projector `Ḡᵀ Ḡ` per Fourier mode.
pub fn detail_response(f: &FilterPair, side: usize, dims: usize) -> Vec<f64> {
    let resp = |filt: &[f64], w: f64| -> f64 {
        let (mut re, mut im) = (0.0, 0.0);
        for (m, c) in filt.iter().enumerate() {
            re += c * (w * m as f64).cos();
            im -= c * (w * m as f64).sin();
        }
        re * re + im * im
    };
    (0..side.pow(dims as u32))
        .map(|i| {
            let w = fourier::frequency_vector(i, side, dims);
            match dims {
                1 => resp(f.highpass(), w[0]) / 2.0,
                _ => {
                    let (g0, h0) = (resp(f.lowpass(), w[0]), resp(f.highpass(), w[0]));
                    let (g1, h1) = (resp(f.lowpass(), w[1]), resp(f.highpass(), w[1]));
                    (g0 * h1 + h0 * g1 + h0 * h1) / 4.0
                }
            }
        })
        .collect()
}

/// Exact first-scale normalizer: root mean detail-coefficient variance.
pub fn analytic_normalizer(g: &StationaryGaussian, f: &FilterPair) -> f64 {
    let r = detail_response(f, g.side, g.dims);
    let energy: f64 = g.spectrum.iter().zip(&r).map(|(p, r)| p * r).sum();
    let count = (wavelet::channel_count(g.dims) * (g.side / 2).pow(g.dims as u32)) as f64;
    (energy / count).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavelet::make_filters;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn spec(eta: f64, xi: f64, side: usize, dims: usize, normalization: SpectrumNormalization) -> SpectrumSpec {
        SpectrumSpec { eta, xi, side, dims, normalization }
    }

    fn random_gaussian(rng: &mut ChaCha8Rng, side: usize, dims: usize) -> StationaryGaussian {
        let d = side.pow(dims as u32);
        let mut p: Vec<f64> = (0..d).map(|_| rng.gen_range(0.2..3.0)).collect();
        for i in 0..d {
            let j = fourier::negated_index(i, side, dims);
            p[j] = p[i];
        }
        StationaryGaussian::new(side, dims, p, 0.0).unwrap()
    }

    #[test]
    fn hand_evaluated_four_point_spectrum() {
        let g = build_spectrum(&spec(1.0, 1.0, 4, 1, SpectrumNormalization::TraceD)).unwrap();
        // Wrapped frequencies 0, 1, -2, -1 times π/2.
        let raw = [1.0, 1.0 / (1.0 + PI / 2.0), 1.0 / (1.0 + PI), 1.0 / (1.0 + PI / 2.0)];
        let c = 4.0 / raw.iter().sum::<f64>();
        for (a, b) in g.spectrum().iter().zip(raw) {
            assert!((a - c * b).abs() < 1e-14);
        }
    }

    #[test]
    fn trace_normalization() {
        for dims in 1..=2 {
            let g = build_spectrum(&spec(1.3, 0.2, 16, dims, SpectrumNormalization::TraceD)).unwrap();
            let s: f64 = g.spectrum().iter().sum();
            assert!((s - g.dim() as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn spectrum_decays_monotonically() {
        let g = build_spectrum(&spec(6.0, 1.0, 16, 2, SpectrumNormalization::Raw)).unwrap();
        let w = fourier::frequency_norms(16, 2);
        for i in 0..w.len() {
            for j in 0..w.len() {
                if w[i] <= w[j] {
                    assert!(g.spectrum()[i] >= g.spectrum()[j]);
                }
            }
        }
    }

    #[test]
    fn invalid_spectra_rejected() {
        assert!(matches!(build_spectrum(&spec(0.0, 1.0, 8, 1, SpectrumNormalization::Raw)), Err(Error::Config(_))));
        assert!(matches!(build_spectrum(&spec(1.0, 0.0, 8, 1, SpectrumNormalization::Raw)), Err(Error::Config(_))));
        assert!(StationaryGaussian::new(2, 1, vec![1.0, -1.0], 0.0).is_err());
        assert!(StationaryGaussian::new(4, 1, vec![1.0, 2.0, 1.0, 3.0], 0.0).is_err());
    }

    #[test]
    fn condition_numbers() {
        assert_eq!(condition_number(&StationaryGaussian::white(8, 2)).unwrap(), 1.0);
        assert_eq!(condition_number_of(&[2.0, 0.5]).unwrap(), 4.0);
        assert!(matches!(condition_number_of(&[1.0, 0.0]), Err(Error::Domain(_))));
        let kappa: Vec<f64> = [16usize, 32, 64, 128, 256]
            .iter()
            .map(|&l| {
                let g = build_spectrum(&spec(1.0, 2.0 * PI / l as f64, l, 1, SpectrumNormalization::Raw)).unwrap();
                condition_number(&g).unwrap() / l as f64
            })
            .collect();
        // κ/L settles to a constant: ratio between consecutive sizes near 1.
        for w in kappa.windows(2) {
            assert!((w[1] / w[0] - 1.0).abs() < 0.1, "{kappa:?}");
        }
    }

    fn log_density(spectrum: &[f64], side: usize, dims: usize, mean: f64, t: f64, x: &[f64]) -> f64 {
        let shift = (-t).exp() * mean;
        let centered: Vec<f64> = x.iter().map(|v| v - shift).collect();
        let xh = fourier::fft(&centered, side, dims);
        let s = noised_spectrum(spectrum, t);
        let d = x.len() as f64;
        -0.5 * xh.iter().zip(&s).map(|(c, s)| c.norm_sqr() / s).sum::<f64>() / d
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for k in 0..20 {
            let dims = 1 + k % 2;
            let side = 8;
            let g = random_gaussian(&mut rng, side, dims).with_mean(rng.gen_range(-1.0..1.0)).unwrap();
            let t = if k == 0 { 0.3 } else { rng.gen_range(0.0..2.0) };
            let x: Vec<f64> = (0..g.dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let s = score_exact_slice(&g, t, &x);
            let h = 1e-5;
            let scale = s.iter().map(|v| v.abs()).fold(0.0, f64::max);
            for u in 0..g.dim() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[u] += h;
                xm[u] -= h;
                let fd = (log_density(g.spectrum(), side, dims, g.mean(), t, &xp)
                    - log_density(g.spectrum(), side, dims, g.mean(), t, &xm))
                    / (2.0 * h);
                assert!((fd - s[u]).abs() < 1e-6 * scale, "fd {fd} vs {}", s[u]);
            }
        }
    }

    #[test]
    fn white_score_is_minus_identity() {
        let g = StationaryGaussian::white(8, 1);
        let x: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        for t in [0.0, 0.7, 3.0] {
            for (a, b) in score_exact_slice(&g, t, &x).iter().zip(&x) {
                assert!((a + b).abs() < 1e-12);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = random_gaussian(&mut rng, 8, 1);
        for (a, b) in score_exact_slice(&g, 40.0, &x).iter().zip(&x) {
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn score_at_zero_is_minus_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = random_gaussian(&mut rng, 4, 2).with_mean(0.4).unwrap();
        let sigma = dense_covariance(&g).unwrap();
        let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xc = nalgebra::DVector::from_iterator(16, x.iter().map(|v| v - 0.4));
        let want = -sigma.cholesky().unwrap().solve(&xc);
        let got = score_exact_slice(&g, 0.0, &x);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    fn lag_covariances(fields: &[Field]) -> (Vec<f64>, Vec<f64>) {
        // Mean and standard error of x[0] x[r] averaged over sites, per lag r.
        let d = fields[0].len();
        let side = fields[0].side();
        let dims = fields[0].dims();
        let n = fields.len() as f64;
        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for f in fields {
            let x = f.as_slice();
            for r in 0..d {
                let mut acc = 0.0;
                for u in 0..d {
                    let v = match dims {
                        1 => (u + r) % side,
                        _ => ((u / side + r / side) % side) * side + (u % side + r % side) % side,
                    };
                    acc += x[u] * x[v];
                }
                acc /= d as f64;
                mean[r] += acc;
                sq[r] += acc * acc;
            }
        }
        let mean: Vec<f64> = mean.iter().map(|m| m / n).collect();
        let se = sq.iter().zip(&mean).map(|(s, m)| ((s / n - m * m) / n).sqrt()).collect();
        (mean, se)
    }

    #[test]
    fn sampler_matches_filtered_white_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = random_gaussian(&mut rng, 4, 2);
        let (side, dims, d) = (4, 2, 16);
        let a = sample(&g, &mut rng, 20000);
        // Oracle: filter real white noise by √P.
        let amp: Vec<f64> = g.spectrum().iter().map(|p| p.sqrt()).collect();
        let b: Vec<Field> = (0..20000)
            .map(|_| {
                let w: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                Field::new(side, dims, fourier::apply_multiplier(&w, side, dims, &amp)).unwrap()
            })
            .collect();
        let (ma, sa) = lag_covariances(&a);
        let (mb, sb) = lag_covariances(&b);
        let sigma = dense_covariance(&g).unwrap();
        for r in 0..d {
            let exact = sigma[(0, r)];
            assert!((ma[r] - exact).abs() < 4.0 * sa[r], "lag {r}");
            assert!((ma[r] - mb[r]).abs() < 4.0 * (sa[r] * sa[r] + sb[r] * sb[r]).sqrt(), "lag {r}");
        }
    }

    #[test]
    fn white_sampler_per_site_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let g = StationaryGaussian::white(8, 1).with_mean(0.5).unwrap();
        let n = 100_000;
        let xs = sample(&g, &mut rng, n);
        let vals: Vec<f64> = xs.iter().map(|f| f.as_slice()[3]).collect();
        let m = vals.iter().sum::<f64>() / n as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((m - 0.5).abs() < 3.0 / (n as f64).sqrt());
        // Standard error of a Gaussian sample variance is √(2/n).
        assert!((v - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn white_conditional_is_trivial() {
        let f = make_filters("haar", 1).unwrap();
        let c = conditional_gaussian(&StationaryGaussian::white(8, 1), &f, 1.0).unwrap();
        assert!(c.a.amax() < 1e-14);
        assert!((&c.gamma - DMatrix::<f64>::identity(4, 4)).amax() < 1e-14);
    }

    fn schur_oracle(g: &StationaryGaussian, f: &FilterPair, gamma1: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        // Permute the full covariance into (detail, low) order and take the Schur complement.
        let (gm, hm) = wavelet::operator_matrices(f, g.side(), g.dims()).unwrap();
        let (nl, nd) = (gm.nrows(), hm.nrows());
        let mut w = DMatrix::zeros(nl + nd, gm.ncols());
        w.rows_mut(0, nd).copy_from(&hm);
        w.rows_mut(nd, nl).copy_from(&gm);
        let full = &w * dense_covariance(g).unwrap() * w.transpose() / (gamma1 * gamma1);
        let s11 = full.view((0, 0), (nd, nd)).clone_owned();
        let s12 = full.view((0, nd), (nd, nl)).clone_owned();
        let s22 = full.view((nd, nd), (nl, nl)).clone_owned();
        let inv = s22.try_inverse().unwrap();
        let a = &s12 * &inv;
        let gamma = &s11 - &s12 * inv * s12.transpose();
        (a, gamma)
    }

    #[test]
    fn conditional_matches_schur_complement() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let cases = [
            ("haar", 1, 4, 1),
            ("daubechies", 4, 16, 1),
            ("daubechies", 2, 8, 1),
            ("haar", 1, 8, 2),
            ("daubechies", 4, 8, 2),
        ];
        for (name, q, side, dims) in cases {
            let f = make_filters(name, q).unwrap();
            let g = random_gaussian(&mut rng, side, dims);
            let gamma1 = analytic_normalizer(&g, &f);
            let c = conditional_gaussian(&g, &f, gamma1).unwrap();
            let (a, gamma) = schur_oracle(&g, &f, gamma1);
            assert!((&c.a - a).amax() < 1e-8, "{name} {side} {dims}");
            assert!((&c.gamma - gamma).amax() < 1e-8);
            let direct = joint_blocks(&c.var_detail, &c.cov_detail_low, &c.var_low);
            assert!((c.joint_covariance() - direct).amax() < 1e-8);
            assert!(c.gamma.trace() <= c.var_detail.trace() + 1e-12);
            let eig = c.gamma.clone().symmetric_eigenvalues();
            assert!(eig.iter().all(|v| *v > -1e-12));
        }
    }

    #[test]
    fn analytic_normalizer_matches_dense_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for (side, dims) in [(16, 1), (8, 2)] {
            let g = random_gaussian(&mut rng, side, dims);
            let f = make_filters("daubechies", 3).unwrap();
            let (_, hm) = wavelet::operator_matrices(&f, side, dims).unwrap();
            let tr = (&hm * dense_covariance(&g).unwrap() * hm.transpose()).trace() / hm.nrows() as f64;
            assert!((analytic_normalizer(&g, &f).powi(2) - tr).abs() < 1e-12);
        }
    }

    #[test]
    fn wavelet_covariance_white_and_unit_diagonal() {
        let f = make_filters("daubechies", 4).unwrap();
        let c = wavelet_covariance(&StationaryGaussian::white(16, 1), &f, 3).unwrap();
        assert!((c - DMatrix::<f64>::identity(16, 16)).amax() < 1e-12);
        let g = build_spectrum(&spec(1.0, PI / 16.0, 32, 1, SpectrumNormalization::Raw)).unwrap();
        let c = wavelet_covariance(&g, &f, 5).unwrap();
        for i in 0..32 {
            assert!((c[(i, i)] - 1.0).abs() < 1e-8);
        }
        assert!((&c - c.transpose()).amax() == 0.0);
        assert!(c.symmetric_eigenvalues().iter().all(|v| *v > -1e-10));
    }

    #[test]
    fn whitening_bounds_condition_number() {
        let f = make_filters("daubechies", 4).unwrap();
        let mut kw = vec![];
        let mut kp = vec![];
        for side in [16usize, 128] {
            let g = build_spectrum(&spec(1.0, 2.0 * PI / side as f64, side, 1, SpectrumNormalization::Raw)).unwrap();
            let c = wavelet_covariance(&g, &f, wavelet::max_scales(side)).unwrap();
            kw.push(condition_number_of(c.symmetric_eigenvalues().as_slice()).unwrap());
            kp.push(condition_number(&g).unwrap());
        }
        assert!(kw[1] / kw[0] < 2.0, "{kw:?}");
        assert!(kp[1] / kp[0] > 4.0, "{kp:?}");
    }
}
