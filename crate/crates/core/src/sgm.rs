//! Forward noising, the reverse Euler-Maruyama chain and the wavelet cascade.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::field::Field;
use crate::gauss_process::{score_exact_slice, StationaryGaussian};
use crate::rng;
use crate::wavelet::{self, FilterPair, NormalizerSet};

/// Uniform reverse-time grid `t_k = k T / N`, `k = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    horizon: f64,
    steps: usize,
}

impl Schedule {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::config(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Schedule { horizon, steps })
    }

    /// Schedule with step size as close as possible to `delta` (rounded to a whole step count).
    pub fn with_step(horizon: f64, delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::config("step size must be positive"));
        }
        Schedule::new(horizon, (horizon / delta).round().max(1.0) as usize)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Uniform step `δ = T / N`; zero when there are no steps.
    pub fn step_size(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.horizon / self.steps as f64
        }
    }

    pub fn time(&self, k: usize) -> f64 {
        if k >= self.steps {
            self.horizon
        } else {
            k as f64 * self.step_size()
        }
    }

    pub fn grid(&self) -> Vec<f64> {
        if self.steps == 0 {
            return vec![0.0];
        }
        (0..=self.steps).map(|k| if k == 0 { 0.0 } else { self.time(k) }).collect()
    }

    pub fn step_sizes(&self) -> Vec<f64> {
        vec![self.step_size(); self.steps]
    }
}

/// A score `(t, x, conditioning) -> ∇ log p_t(x | conditioning)`.
pub trait ScoreFunction: Sync {
    fn score(&self, t: f64, x: &[f64], cond: Option<&[f64]>) -> Vec<f64>;
}

impl<F> ScoreFunction for F
where
    F: Fn(f64, &[f64], Option<&[f64]>) -> Vec<f64> + Sync,
{
    fn score(&self, t: f64, x: &[f64], cond: Option<&[f64]>) -> Vec<f64> {
        self(t, x, cond)
    }
}

/// Exact score of a stationary Gaussian target.
pub struct GaussianScore<'a>(pub &'a StationaryGaussian);

impl ScoreFunction for GaussianScore<'_> {
    fn score(&self, t: f64, x: &[f64], _cond: Option<&[f64]>) -> Vec<f64> {
        score_exact_slice(self.0, t, x)
    }
}

/// `x_t = e^{-t} x_0 + sqrt(1 - e^{-2t}) z`.
pub fn forward_noise<R: Rng + ?Sized>(x0: &[f64], t: f64, rng: &mut R) -> Vec<f64> {
    let a = (-t).exp();
    let b = (-(-2.0 * t).exp_m1()).sqrt();
    x0.iter().map(|v| a * v + b * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn forward_noise_field<R: Rng + ?Sized>(x0: &Field, t: f64, rng: &mut R) -> Result<Field> {
    if !(t >= 0.0) {
        return Err(Error::domain("diffusion time must be non-negative"));
    }
    Field::new(x0.side(), x0.dims(), forward_noise(x0.as_slice(), t, rng))
}

/// Reverse chain from `x_T ~ N(0, Id)` down to `t_0 = 0`:
/// `x ← x + δ (x + 2 s(t_k, x)) + sqrt(2δ) z` for `k = N, ..., 1`.
pub fn euler_maruyama_reverse<R: Rng + ?Sized>(
    score: &dyn ScoreFunction,
    sched: &Schedule,
    dim: usize,
    cond: Option<&[f64]>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let delta = sched.step_size();
    let noise = (2.0 * delta).sqrt();
    for k in (1..=sched.steps()).rev() {
        let s = score.score(sched.time(k), &x, cond);
        if s.len() != dim {
            return Err(Error::shape(format!("score returned {} values for a state of size {dim}", s.len())));
        }
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += delta * (*xi + 2.0 * si) + noise * rng.sample::<f64, _>(StandardNormal);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: k, stage: None });
        }
    }
    Ok(x)
}

/// Independent reverse chains in parallel; chain `i` uses stream `i` of `seed`.
pub fn reverse_sample_batch(
    score: &dyn ScoreFunction,
    sched: &Schedule,
    dim: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            euler_maruyama_reverse(score, sched, dim, None, &mut r)
        })
        .collect()
}

/// Scores and wavelet bookkeeping for a coarse-to-fine cascade.
pub struct Cascade<'a> {
    pub coarse: &'a dyn ScoreFunction,
    /// `details[j - 1]` scores x̄_j given x_j.
    pub details: Vec<&'a dyn ScoreFunction>,
    pub filters: &'a FilterPair,
    pub norms: &'a NormalizerSet,
    pub base_side: usize,
    pub dims: usize,
}

impl Cascade<'_> {
    pub fn scales(&self) -> usize {
        self.details.len()
    }
}

/// Sample `x_J` unconditionally, then each x̄_j given x_j and reconstruct
/// `x_{j-1} = γ_j (Gᵀ x_j + Ḡᵀ x̄_j)` down to the full field.
pub fn wsgm_sample<R: Rng + ?Sized>(c: &Cascade<'_>, sched: &Schedule, rng: &mut R) -> Result<Field> {
    let scales = c.scales();
    if c.norms.scales() != scales {
        return Err(Error::config("one normalizer per conditional score is required"));
    }
    if scales > wavelet::max_scales(c.base_side) {
        return Err(Error::shape(format!("side {} does not support {scales} scales", c.base_side)));
    }
    let dims = c.dims;
    let mut side = c.base_side >> scales;
    let mut x = euler_maruyama_reverse(c.coarse, sched, side.pow(dims as u32), None, rng)
        .map_err(|e| e.at_stage(Stage::Coarse { scale: scales }))?;
    for j in (1..=scales).rev() {
        let det_len = wavelet::channel_count(dims) * side.pow(dims as u32);
        let det = euler_maruyama_reverse(c.details[j - 1], sched, det_len, Some(&x), rng)
            .map_err(|e| e.at_stage(Stage::Detail { scale: j }))?;
        x = wavelet::reconstruct_step(&x, &det, side, dims, c.norms.gamma[j - 1], c.filters)?;
        side *= 2;
    }
    Field::new(side, dims, x)
}

/// Exact score of the conditional `N(e^{-t} A x_low, e^{-2t} Γ + (1 - e^{-2t}) Id)`,
/// evaluated with a dense solve.
pub fn exact_conditional_score(
    a: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    t: f64,
    xbar: &[f64],
    x_low: &[f64],
) -> Result<Vec<f64>> {
    let n = gamma.nrows();
    if a.nrows() != n || a.ncols() != x_low.len() || xbar.len() != n {
        return Err(Error::shape("conditional score operands have inconsistent sizes"));
    }
    let e2 = (-2.0 * t).exp();
    let cov = gamma * e2 + DMatrix::identity(n, n) * (1.0 - e2);
    let chol = cov.cholesky().ok_or_else(|| Error::domain("conditional covariance is singular"))?;
    let r = DVector::from_column_slice(xbar) - a * DVector::from_column_slice(x_low) * (-t).exp();
    Ok((-chol.solve(&r)).as_slice().to_vec())
}

/// Eigen-factored form of [`exact_conditional_score`] for repeated evaluation.
pub struct ExactConditionalScore {
    a: DMatrix<f64>,
    basis: DMatrix<f64>,
    eigenvalues: Vec<f64>,
}

impl ExactConditionalScore {
    pub fn new(a: DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<Self> {
        if gamma.nrows() != a.nrows() || !gamma.is_square() {
            return Err(Error::shape("A and Γ sizes differ"));
        }
        let eig = gamma.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|v| *v < -1e-10 * eig.eigenvalues.amax().max(1.0)) {
            return Err(Error::domain("Γ is not positive semi-definite"));
        }
        Ok(ExactConditionalScore {
            a,
            basis: eig.eigenvectors,
            eigenvalues: eig.eigenvalues.iter().map(|v| v.max(0.0)).collect(),
        })
    }
}

impl ScoreFunction for ExactConditionalScore {
    fn score(&self, t: f64, x: &[f64], cond: Option<&[f64]>) -> Vec<f64> {
        let e2 = (-2.0 * t).exp();
        let mut r = DVector::from_column_slice(x);
        if let Some(low) = cond {
            r -= &self.a * DVector::from_column_slice(low) * (-t).exp();
        }
        let mut c = self.basis.tr_mul(&r);
        for (ci, l) in c.iter_mut().zip(&self.eigenvalues) {
            *ci /= -(e2 * l + 1.0 - e2);
        }
        (&self.basis * c).as_slice().to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss_process::{analytic_normalizer, conditional_gaussian};
    use crate::wavelet::make_filters;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn schedule_grid() {
        let s = Schedule::new(5.0, 7).unwrap();
        let g = s.grid();
        assert_eq!(g[0], 0.0);
        assert_eq!(*g.last().unwrap(), 5.0);
        assert!((s.step_sizes().iter().sum::<f64>() - 5.0).abs() < 1e-14);
        assert!(s.step_sizes().iter().all(|d| *d > 0.0));
        assert!(Schedule::new(0.0, 3).is_err());
    }

    #[test]
    fn forward_noise_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = vec![1.5, -2.0];
        assert_eq!(forward_noise(&x0, 0.0, &mut rng), x0);
        let n = 100_000;
        let mut m = 0.0;
        for _ in 0..n {
            m += forward_noise(&[3.0], 10.0, &mut rng)[0];
        }
        assert!((m / n as f64).abs() < 3.0 / (n as f64).sqrt() + 3.0 * (-10f64).exp());
    }

    #[test]
    fn forward_noise_variance_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, t, var0): (usize, f64, f64) = (100_000, 0.4, 4.0);
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                let x0 = var0.sqrt() * rng.sample::<f64, _>(StandardNormal);
                forward_noise(&[x0], t, &mut rng)[0]
            })
            .collect();
        let v = vals.iter().map(|x| x * x).sum::<f64>() / n as f64;
        let want = (-2.0 * t).exp() * var0 + 1.0 - (-2.0 * t).exp();
        assert!((v - want).abs() < 3.0 * want * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let sched = Schedule::new(1.0, 0).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let x = euler_maruyama_reverse(&|_t: f64, x: &[f64], _c: Option<&[f64]>| x.to_vec(), &sched, 4, None, &mut a)
            .unwrap();
        let z: Vec<f64> = (0..4).map(|_| b.sample(StandardNormal)).collect();
        assert_eq!(x, z);
    }

    #[test]
    fn white_target_fixed_point() {
        // With δ = 0.1 the per-mode variance settles at 1 / (1 - δ/2).
        let g = StationaryGaussian::white(4, 1);
        let sched = Schedule::new(10.0, 100).unwrap();
        let out = reverse_sample_batch(&GaussianScore(&g), &sched, 4, 50_000, 9).unwrap();
        let n = (out.len() * 4) as f64;
        let v = out.iter().flatten().map(|x| x * x).sum::<f64>() / n;
        let want = 1.0 / (1.0 - 0.05);
        assert!((v - want).abs() < 3.0 * want * (2.0 / n).sqrt(), "{v}");
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let sched = Schedule::new(1.0, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bad =
            |t: f64, x: &[f64], _c: Option<&[f64]>| if t < 0.55 { vec![f64::NAN; x.len()] } else { vec![0.0; x.len()] };
        match euler_maruyama_reverse(&bad, &sched, 3, None, &mut rng) {
            Err(Error::Divergence { step, stage: None }) => assert_eq!(step, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let g = StationaryGaussian::white(8, 1);
        let sched = Schedule::new(2.0, 20).unwrap();
        let a = reverse_sample_batch(&GaussianScore(&g), &sched, 8, 16, 77).unwrap();
        let b = reverse_sample_batch(&GaussianScore(&g), &sched, 8, 16, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cascade_without_scales_is_plain_sampler() {
        let g = StationaryGaussian::white(8, 1);
        let f = make_filters("haar", 1).unwrap();
        let norms = NormalizerSet::identity(0);
        let score = GaussianScore(&g);
        let c = Cascade { coarse: &score, details: vec![], filters: &f, norms: &norms, base_side: 8, dims: 1 };
        let sched = Schedule::new(3.0, 12).unwrap();
        let a = wsgm_sample(&c, &sched, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = euler_maruyama_reverse(&score, &sched, 8, None, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.as_slice(), &b[..]);
    }

    #[test]
    fn cascade_counts_score_calls_and_tags_stage() {
        let calls = AtomicUsize::new(0);
        let counting = |_t: f64, x: &[f64], _c: Option<&[f64]>| {
            calls.fetch_add(1, Ordering::Relaxed);
            x.iter().map(|v| -v).collect::<Vec<f64>>()
        };
        let f = make_filters("daubechies", 2).unwrap();
        let norms = NormalizerSet { gamma: vec![1.0, 0.8, 0.6] };
        let c = Cascade {
            coarse: &counting,
            details: vec![&counting; 3],
            filters: &f,
            norms: &norms,
            base_side: 16,
            dims: 2,
        };
        let sched = Schedule::new(2.0, 9).unwrap();
        let x = wsgm_sample(&c, &sched, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(x.side(), 16);
        assert_eq!(calls.load(Ordering::Relaxed), 9 * 4);

        let bad = |_t: f64, x: &[f64], _c: Option<&[f64]>| vec![f64::INFINITY; x.len()];
        let c = Cascade {
            coarse: &counting,
            details: vec![&counting, &bad, &counting],
            filters: &f,
            norms: &norms,
            base_side: 16,
            dims: 2,
        };
        match wsgm_sample(&c, &sched, &mut ChaCha8Rng::seed_from_u64(6)) {
            Err(Error::Divergence { stage: Some(Stage::Detail { scale: 2 }), .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn conditional_score_special_cases() {
        let a = DMatrix::zeros(3, 2);
        let id = DMatrix::identity(3, 3);
        let xbar = [0.3, -1.0, 2.0];
        let s = exact_conditional_score(&a, &id, 0.7, &xbar, &[1.0, 2.0]).unwrap();
        for (u, v) in s.iter().zip(xbar) {
            assert!((u + v).abs() < 1e-14);
        }
        let a = DMatrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64 * 0.3);
        let gam = DMatrix::from_fn(3, 3, |i, j| if i == j { 2.0 } else { 0.4 });
        let s = exact_conditional_score(&a, &gam, 40.0, &xbar, &[1.0, 2.0]).unwrap();
        for (u, v) in s.iter().zip(xbar) {
            assert!((u + v).abs() < 1e-12);
        }
        let singular = DMatrix::zeros(3, 3);
        assert!(matches!(exact_conditional_score(&a, &singular, 0.0, &xbar, &[1.0, 2.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn conditional_score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = make_filters("daubechies", 2).unwrap();
        let p: Vec<f64> = {
            let mut p: Vec<f64> = (0..8).map(|_| rng.gen_range(0.3..4.0)).collect();
            for i in 0..8 {
                p[(8 - i) % 8] = p[i];
            }
            p
        };
        let g = StationaryGaussian::new(8, 1, p, 0.0).unwrap();
        let c = conditional_gaussian(&g, &f, analytic_normalizer(&g, &f)).unwrap();
        let fast = ExactConditionalScore::new(c.a.clone(), &c.gamma).unwrap();
        for _ in 0..5 {
            let t: f64 = rng.gen_range(0.0..1.5);
            let xbar: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let low: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let e2 = (-2.0 * t).exp();
            let cov = &c.gamma * e2 + DMatrix::identity(4, 4) * (1.0 - e2);
            let prec = cov.try_inverse().unwrap();
            let mean = &c.a * DVector::from_column_slice(&low) * (-t).exp();
            let logp = |x: &[f64]| {
                let r = DVector::from_column_slice(x) - &mean;
                -0.5 * (r.transpose() * &prec * &r)[(0, 0)]
            };
            let s = exact_conditional_score(&c.a, &c.gamma, t, &xbar, &low).unwrap();
            let s2 = fast.score(t, &xbar, Some(&low));
            for u in 0..4 {
                let (mut xp, mut xm) = (xbar.clone(), xbar.clone());
                xp[u] += 1e-5;
                xm[u] -= 1e-5;
                let fd = (logp(&xp) - logp(&xm)) / 2e-5;
                assert!((fd - s[u]).abs() < 1e-6 * s[u].abs().max(1.0));
                assert!((s2[u] - s[u]).abs() < 1e-10);
            }
        }
    }
}
