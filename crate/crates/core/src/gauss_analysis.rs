//! Exact analysis of the discretized reverse chain for Gaussian targets.
//!
//! Every quantity here is computed per covariance eigenvalue: with a
//! stationary target, all the matrices involved share the Fourier basis.
//! The per-mode chain is `x ← λ_k x + δ·2e^{-t}μ/σ_t + sqrt(2δ) z` with
//! `σ_t = e^{-2t} p + 1 - e^{-2t}` and `λ_k = 1 + δ - 2δ/σ_{T - kδ}`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier;
use crate::gauss_process::{analytic_normalizer, conditional_gaussian, StationaryGaussian};
use crate::sgm::Schedule;
use crate::wavelet::{self, FilterPair};

/// Radius around `p = 1` inside which singular factors use their series.
const SERIES_RADIUS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationOutcome {
    pub spectrum_out: Vec<f64>,
    pub mean_out: Vec<f64>,
    pub horizon: f64,
    pub step: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub e_t: f64,
    pub e_delta: f64,
    pub kl_exact: f64,
    pub residual: f64,
}

/// Per-mode closed-form first-order corrections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpansionTerms {
    pub sigma_delta: f64,
    pub sigma_t: f64,
    pub mu_delta: f64,
    pub mu_t: f64,
}

fn sigma_t(p: f64, t: f64) -> f64 {
    let e = (-2.0 * t).exp();
    e * p + 1.0 - e
}

fn check_schedule(sched: &Schedule) -> Result<()> {
    if sched.steps() > 0 && sched.step_size() >= 1.0 {
        return Err(Error::config(format!("step size {} must be below 1 for a stable chain", sched.step_size())));
    }
    Ok(())
}

fn check_spectrum(spectrum: &[f64]) -> Result<()> {
    match spectrum.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
        Some(p) => Err(Error::domain(format!("eigenvalues must be positive, found {p}"))),
        None => Ok(()),
    }
}

/// Variance of one mode after the first `steps` reverse steps (of the `N` in `sched`).
fn variance_after(p: f64, sched: &Schedule, steps: usize) -> f64 {
    let (t, d) = (sched.horizon(), sched.step_size());
    let mut h = 1.0;
    for k in 0..steps {
        let lam = 1.0 + d - 2.0 * d / sigma_t(p, t - k as f64 * d);
        h = lam * lam * h + 2.0 * d;
    }
    h
}

fn mean_after(p: f64, mu: f64, sched: &Schedule, steps: usize) -> f64 {
    let (t, d) = (sched.horizon(), sched.step_size());
    let mut h = 0.0;
    for k in 0..steps {
        let tk = t - k as f64 * d;
        let s = sigma_t(p, tk);
        h = (1.0 + d - 2.0 * d / s) * h + 2.0 * d * (-tk).exp() * mu / s;
    }
    h
}

/// Output variance `h_N` per mode, starting from `h_0 = 1`.
pub fn covariance_recursion(spectrum: &[f64], sched: &Schedule) -> Result<Vec<f64>> {
    check_spectrum(spectrum)?;
    check_schedule(sched)?;
    Ok(spectrum.iter().map(|&p| variance_after(p, sched, sched.steps())).collect())
}

/// Variance per mode after `steps` of the `N` steps, i.e. at reverse time `steps·δ`.
pub fn covariance_partial(spectrum: &[f64], sched: &Schedule, steps: usize) -> Result<Vec<f64>> {
    check_spectrum(spectrum)?;
    check_schedule(sched)?;
    Ok(spectrum.iter().map(|&p| variance_after(p, sched, steps.min(sched.steps()))).collect())
}

/// Output mean per mode, starting from `h_0 = 0`.
pub fn mean_recursion(spectrum: &[f64], mu: &[f64], sched: &Schedule) -> Result<Vec<f64>> {
    check_spectrum(spectrum)?;
    check_schedule(sched)?;
    if mu.len() != spectrum.len() {
        return Err(Error::shape("mean and spectrum lengths differ"));
    }
    Ok(spectrum.iter().zip(mu).map(|(&p, &m)| mean_after(p, m, sched, sched.steps())).collect())
}

pub fn discretize(spectrum: &[f64], mu: &[f64], sched: &Schedule) -> Result<DiscretizationOutcome> {
    Ok(DiscretizationOutcome {
        spectrum_out: covariance_recursion(spectrum, sched)?,
        mean_out: mean_recursion(spectrum, mu, sched)?,
        horizon: sched.horizon(),
        step: sched.step_size(),
        steps: sched.steps(),
    })
}

/// `KL(N(μ0, S0) ‖ N(μ1, S1))` for simultaneously diagonal covariances given by eigenvalues.
pub fn kl_gaussians(mu0: &[f64], s0: &[f64], mu1: &[f64], s1: &[f64]) -> Result<f64> {
    let d = s0.len();
    if s1.len() != d || mu0.len() != d || mu1.len() != d {
        return Err(Error::shape("KL operands have different lengths"));
    }
    check_spectrum(s0)?;
    check_spectrum(s1)?;
    let mut acc = 0.0;
    for i in 0..d {
        let r = s0[i] / s1[i];
        // log(s1/s0) - 1 + s0/s1 written to keep precision near r = 1.
        acc += (r - 1.0) - r.ln() + (mu1[i] - mu0[i]).powi(2) / s1[i];
    }
    Ok(0.5 * acc)
}

/// Exact KL between zero-mean Gaussians with dense covariances.
pub fn kl_dense(cov0: &DMatrix<f64>, cov1: &DMatrix<f64>) -> Result<f64> {
    let d = cov0.nrows();
    if cov1.shape() != (d, d) || cov0.ncols() != d {
        return Err(Error::shape("covariances must be square and of equal size"));
    }
    let c0 = cov0.clone().cholesky().ok_or_else(|| Error::domain("first covariance is not positive definite"))?;
    let c1 = cov1.clone().cholesky().ok_or_else(|| Error::domain("second covariance is not positive definite"))?;
    let logdet =
        |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let tr = c1.solve(cov0).trace();
    Ok(0.5 * (logdet(&c1) - logdet(&c0) - d as f64 + tr))
}

/// `f(t) = t - log(1 + t)`.
pub fn log_excess(t: f64) -> f64 {
    if t.abs() < 1e-4 {
        t * t * (0.5 - t * (1.0 / 3.0 - t * (0.25 - t / 5.0)))
    } else {
        t - t.ln_1p()
    }
}

/// `log(p) / (p - 1)`, continuous through `p = 1`.
pub fn log_ratio(p: f64) -> f64 {
    let u = p - 1.0;
    if u.abs() < SERIES_RADIUS {
        1.0 - u / 2.0 + u * u / 3.0 - u * u * u / 4.0
    } else {
        p.ln() / u
    }
}

pub fn leading_error_terms(spectrum: &[f64], horizon: f64, delta: f64) -> Result<ErrorBreakdown> {
    check_spectrum(spectrum)?;
    let sched = Schedule::with_step(horizon, delta)?;
    let delta = sched.step_size();
    let bias: f64 = spectrum.iter().map(|p| (p - 1.0) * p).sum();
    let disc: f64 = spectrum.iter().map(|p| 1.0 / p - 0.5 * p * log_ratio(*p) + (1.0 - 1.0 / p) / 3.0).sum();
    let e_t = log_excess((-4.0 * horizon).exp() * bias.abs());
    let e_delta = log_excess(delta * disc.abs());
    let out = covariance_recursion(spectrum, &sched)?;
    let zeros = vec![0.0; spectrum.len()];
    let kl_exact = kl_gaussians(&zeros, spectrum, &zeros, &out)?;
    Ok(ErrorBreakdown { e_t, e_delta, kl_exact, residual: kl_exact - e_t - e_delta })
}

pub fn covariance_expansion(spectrum: &[f64], mu: &[f64]) -> Result<Vec<ExpansionTerms>> {
    check_spectrum(spectrum)?;
    if mu.len() != spectrum.len() {
        return Err(Error::shape("mean and spectrum lengths differ"));
    }
    Ok(spectrum
        .iter()
        .zip(mu)
        .map(|(&p, &m)| {
            let lr = log_ratio(p);
            ExpansionTerms {
                sigma_delta: 1.0 - 0.5 * p * p * lr,
                sigma_t: -(p - 1.0) * p * p,
                mu_delta: (-2.0 / p - 0.25 * p * lr) * m,
                mu_t: p * m,
            }
        })
        .collect())
}

/// Continuous-time variance of the backward process at reverse time `t`,
/// started from `N(0, Id)` at horizon `T`.
pub fn backward_marginal_exact(spectrum: &[f64], horizon: f64, t: f64) -> Result<Vec<f64>> {
    check_spectrum(spectrum)?;
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::domain(format!("time {t} outside [0, {horizon}]")));
    }
    let e = (-2.0 * t).exp();
    Ok(spectrum
        .iter()
        .map(|&p| {
            let alpha = (p - 1.0) * (-2.0 * horizon).exp();
            let grow = 1.0 + alpha / e;
            (1.0 - e) * grow / (1.0 + alpha) + e * grow * grow / ((1.0 + alpha) * (1.0 + alpha))
        })
        .collect())
}

/// `max |P̂ - P| / max |P|`.
pub fn spectrum_error(p_hat: &[f64], p: &[f64]) -> f64 {
    let num = p_hat.iter().zip(p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let den = p.iter().map(|v| v.abs()).fold(0.0, f64::max);
    num / den
}

/// Spectrum error of a sampler as a function of the step count.
pub trait ErrorCurve: Sync {
    fn horizon(&self) -> f64;
    fn error(&self, steps: usize) -> Result<f64>;
    /// Error of the continuous-time chain at this horizon, if known.
    fn floor(&self) -> Option<f64> {
        None
    }
}

/// Plain reverse chain on a stationary Gaussian target.
pub struct SgmCurve {
    spectrum: Vec<f64>,
    horizon: f64,
}

impl SgmCurve {
    pub fn new(spectrum: Vec<f64>, horizon: f64) -> Result<Self> {
        check_spectrum(&spectrum)?;
        Ok(SgmCurve { spectrum, horizon })
    }
}

impl ErrorCurve for SgmCurve {
    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn error(&self, steps: usize) -> Result<f64> {
        let out = covariance_recursion(&self.spectrum, &Schedule::new(self.horizon, steps)?)?;
        Ok(spectrum_error(&out, &self.spectrum))
    }

    fn floor(&self) -> Option<f64> {
        let v = backward_marginal_exact(&self.spectrum, self.horizon, self.horizon).ok()?;
        Some(spectrum_error(&v, &self.spectrum))
    }
}

/// One-scale cascade on a stationary Gaussian: the low-pass field is drawn
/// exactly and the normalized details are sampled with the exact conditional
/// score; the error is measured on the resulting pixel-domain spectrum.
pub struct WsgmOneScaleCurve {
    spectrum: Vec<f64>,
    side: usize,
    dims: usize,
    horizon: f64,
    gamma1: f64,
    a: DMatrix<f64>,
    var_low: DMatrix<f64>,
    basis: DMatrix<f64>,
    cond_eigenvalues: Vec<f64>,
    synthesis: DMatrix<f64>,
    joint: DMatrix<f64>,
}

impl WsgmOneScaleCurve {
    pub fn new(g: &StationaryGaussian, f: &FilterPair, horizon: f64) -> Result<Self> {
        let gamma1 = analytic_normalizer(g, f);
        let c = conditional_gaussian(g, f, gamma1)?;
        let eig = c.gamma.clone().symmetric_eigen();
        let joint = c.joint_covariance();
        let (gm, hm) = wavelet::operator_matrices(f, g.side(), g.dims())?;
        let (nd, nl, d) = (hm.nrows(), gm.nrows(), g.dim());
        // Rows ordered (x̄, x) to match the joint covariance layout.
        let mut b = DMatrix::zeros(nd + nl, d);
        b.rows_mut(0, nd).copy_from(&hm);
        b.rows_mut(nd, nl).copy_from(&gm);
        Ok(WsgmOneScaleCurve {
            spectrum: g.spectrum().to_vec(),
            side: g.side(),
            dims: g.dims(),
            horizon,
            gamma1,
            a: c.a,
            var_low: c.var_low,
            basis: eig.eigenvectors,
            cond_eigenvalues: eig.eigenvalues.iter().map(|v| v.max(1e-12)).collect(),
            synthesis: b * gamma1,
            joint,
        })
    }

    pub fn normalizer(&self) -> f64 {
        self.gamma1
    }

    pub fn conditional_eigenvalues(&self) -> &[f64] {
        &self.cond_eigenvalues
    }

    /// Joint covariance of `(x̄_1, x_1)` produced by the chain with `steps` steps.
    pub fn generated_joint(&self, steps: usize) -> Result<DMatrix<f64>> {
        let sched = Schedule::new(self.horizon, steps)?;
        let h = covariance_recursion(&self.cond_eigenvalues, &sched)?;
        let rho = mean_recursion(&self.cond_eigenvalues, &vec![1.0; h.len()], &sched)?;
        let q = &self.basis;
        let a_hat = q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(rho)) * q.transpose() * &self.a;
        let g_hat = q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(h)) * q.transpose();
        let cov = &a_hat * &self.var_low;
        let var_detail = &g_hat + &cov * a_hat.transpose();
        Ok(crate::gauss_process::joint_blocks(&var_detail, &cov, &self.var_low))
    }

    /// True joint covariance of `(x̄_1, x_1)`.
    pub fn true_joint(&self) -> &DMatrix<f64> {
        &self.joint
    }

    /// Fourier diagonal of the pixel covariance produced by the chain.
    pub fn generated_spectrum(&self, steps: usize) -> Result<Vec<f64>> {
        let joint = self.generated_joint(steps)?;
        let pixel = self.synthesis.transpose() * joint * &self.synthesis;
        Ok(fourier_diagonal(&pixel, self.side, self.dims))
    }

    pub fn kl(&self, steps: usize) -> Result<f64> {
        kl_dense(&self.joint, &self.generated_joint(steps)?)
    }
}

impl ErrorCurve for WsgmOneScaleCurve {
    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn error(&self, steps: usize) -> Result<f64> {
        Ok(spectrum_error(&self.generated_spectrum(steps)?, &self.spectrum))
    }
}

/// `diag(F M F*)` of a pixel-domain matrix: the Fourier transform of its
/// site-averaged autocovariance.
pub fn fourier_diagonal(m: &DMatrix<f64>, side: usize, dims: usize) -> Vec<f64> {
    let d = m.nrows();
    let mut c = vec![0.0; d];
    for u in 0..d {
        for r in 0..d {
            let v = match dims {
                1 => (u + r) % side,
                _ => ((u / side + r / side) % side) * side + (u % side + r % side) % side,
            };
            c[r] += m[(u, v)];
        }
    }
    let spec = fourier::fft(&c, side, dims);
    spec.iter().map(|z| z.re / d as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum StepsToError {
    /// Smallest step count reaching the target.
    Reached(usize),
    /// Power-law extrapolation beyond the search cap.
    Extrapolated(f64),
    /// The target lies below the error of the continuous chain at this horizon.
    Floor(f64),
}

impl StepsToError {
    pub fn steps(&self) -> Option<f64> {
        match self {
            StepsToError::Reached(n) => Some(*n as f64),
            StepsToError::Extrapolated(n) => Some(*n),
            StepsToError::Floor(_) => None,
        }
    }
}

/// Smallest `N ≥ 1` with `error(N) ≤ ε`. Only stable step counts (`δ < 1`)
/// are considered; the search doubles from the smallest stable `N` and then
/// bisects, assuming the error decreases in `N` past that point. For `ε ≥ 1`
/// the unmodified `N(0, Id)` start is accepted when it already qualifies.
pub fn steps_to_error(curve: &dyn ErrorCurve, eps: f64, cap: usize) -> Result<StepsToError> {
    if !(eps > 0.0) {
        return Err(Error::config("target error must be positive"));
    }
    if eps >= 1.0 && curve.error(0)? <= eps {
        return Ok(StepsToError::Reached(0));
    }
    if let Some(floor) = curve.floor() {
        if floor >= eps {
            return Ok(StepsToError::Floor(floor));
        }
    }
    let first = curve.horizon().floor() as usize + 1;
    if curve.error(first)? <= eps {
        return Ok(StepsToError::Reached(first));
    }
    let (mut lo, mut hi) = (first, 2 * first);
    loop {
        if hi > cap {
            let (e1, e2) = (curve.error(lo / 2)?, curve.error(lo)?);
            if e2 >= e1 * 0.999 {
                return Ok(StepsToError::Floor(e2));
            }
            let slope = (e1 / e2).ln() / 2f64.ln();
            return Ok(StepsToError::Extrapolated(lo as f64 * (e2 / eps).powf(1.0 / slope)));
        }
        if curve.error(hi)? <= eps {
            break;
        }
        lo = hi;
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if curve.error(mid)? <= eps {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(StepsToError::Reached(hi))
}
