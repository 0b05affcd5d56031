//! Linear-in-parameters score models trained by implicit score matching.
//!
//! The potential is `s(x) = ½ xᵀKx + Σ_u Σ_i θ_i v_i(x(u))`, with `K` a
//! translation-invariant stencil, so the score `∇s` and its divergence are
//! both linear in the parameter vector `φ = (stencil weights, θ)`. The
//! implicit loss `E[|∇s|² + 2Δs]` is therefore the quadratic
//! `φᵀMφ + 2bᵀφ`, which is what the optimizer and the least-squares oracle
//! work with.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{check_dims, ordered_sum, Field};
use crate::rng;
use crate::sgm::{forward_noise, ScoreFunction};
use crate::wavelet::{self, FilterPair};

/// Even monomials used as on-site potentials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisFunction {
    /// `x²`
    Quadratic,
    /// `x⁴`
    Quartic,
    /// `x⁶`
    Sextic,
}

impl BasisFunction {
    fn power(self) -> i32 {
        match self {
            BasisFunction::Quadratic => 2,
            BasisFunction::Quartic => 4,
            BasisFunction::Sextic => 6,
        }
    }

    pub fn value(self, x: f64) -> f64 {
        x.powi(self.power())
    }

    pub fn d1(self, x: f64) -> f64 {
        let n = self.power();
        n as f64 * x.powi(n - 1)
    }

    pub fn d2(self, x: f64) -> f64 {
        let n = self.power();
        (n * (n - 1)) as f64 * x.powi(n - 2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalarBasis {
    funcs: Vec<BasisFunction>,
}

impl ScalarBasis {
    /// Checks both derivatives against central differences before accepting.
    pub fn new(funcs: Vec<BasisFunction>) -> Result<Self> {
        let h = 1e-5;
        for f in &funcs {
            for x in [-1.7, -0.4, 0.3, 1.1, 2.0] {
                let d1 = (f.value(x + h) - f.value(x - h)) / (2.0 * h);
                let d2 = (f.d1(x + h) - f.d1(x - h)) / (2.0 * h);
                if (d1 - f.d1(x)).abs() > 1e-7 * f.d1(x).abs().max(1.0)
                    || (d2 - f.d2(x)).abs() > 1e-7 * f.d2(x).abs().max(1.0)
                {
                    return Err(Error::domain(format!("derivatives of {f:?} fail the finite-difference check at {x}")));
                }
            }
        }
        Ok(ScalarBasis { funcs })
    }

    /// Quadratic scores only.
    pub fn empty() -> Self {
        ScalarBasis { funcs: vec![] }
    }

    /// `{x⁴}`: together with the stencil center this spans the double well.
    pub fn phi4() -> Self {
        ScalarBasis { funcs: vec![BasisFunction::Quartic] }
    }

    pub fn len(&self) -> usize {
        self.funcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.funcs.is_empty()
    }

    pub fn functions(&self) -> &[BasisFunction] {
        &self.funcs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearScoreParams {
    /// Center, nearest-neighbor and next-nearest weights of `K`.
    pub stencil: Vec<f64>,
    pub theta: Vec<f64>,
}

impl LinearScoreParams {
    pub fn zeros(stencil_terms: usize, basis_len: usize) -> Self {
        LinearScoreParams { stencil: vec![0.0; stencil_terms], theta: vec![0.0; basis_len] }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.stencil.iter().chain(&self.theta).copied().collect()
    }

    pub fn from_vec(v: &[f64], stencil_terms: usize) -> Self {
        LinearScoreParams { stencil: v[..stencil_terms].to_vec(), theta: v[stencil_terms..].to_vec() }
    }
}

/// Neighbor offsets of stencil shell `a`: 0 is the site itself, 1 the
/// nearest neighbors, 2 the diagonals in 2D or distance-2 sites in 1D.
fn shell_offsets(a: usize, dims: usize) -> Vec<[isize; 2]> {
    match (a, dims) {
        (0, _) => vec![[0, 0]],
        (1, 1) => vec![[1, 0], [-1, 0]],
        (2, 1) => vec![[2, 0], [-2, 0]],
        (1, _) => vec![[1, 0], [-1, 0], [0, 1], [0, -1]],
        _ => vec![[1, 1], [1, -1], [-1, 1], [-1, -1]],
    }
}

#[derive(Debug, Clone)]
struct Shell {
    /// `per_site` flat neighbor indices for each site.
    neighbors: Vec<usize>,
    per_site: usize,
    trace: f64,
}

impl Shell {
    fn build(a: usize, side: usize, dims: usize) -> Shell {
        let offs = shell_offsets(a, dims);
        let d = side.pow(dims as u32);
        let s = side as isize;
        let mut neighbors = Vec::with_capacity(d * offs.len());
        let mut trace = 0.0;
        for u in 0..d {
            let (i, j) = if dims == 1 { (u as isize, 0) } else { ((u / side) as isize, (u % side) as isize) };
            for o in &offs {
                let v = if dims == 1 {
                    (i + o[0]).rem_euclid(s) as usize
                } else {
                    ((i + o[0]).rem_euclid(s) * s + (j + o[1]).rem_euclid(s)) as usize
                };
                if v == u {
                    trace += 1.0;
                }
                neighbors.push(v);
            }
        }
        Shell { neighbors, per_site: offs.len(), trace }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.neighbors.chunks(self.per_site).map(|nb| nb.iter().map(|&v| x[v]).sum()).collect()
    }

    fn apply_add(&self, c: f64, x: &[f64], out: &mut [f64]) {
        for (o, nb) in out.iter_mut().zip(self.neighbors.chunks(self.per_site)) {
            *o += c * nb.iter().map(|&v| x[v]).sum::<f64>();
        }
    }
}

/// A score family linear in its parameters: `score = Σ_a φ_a F_a(x)` and
/// `div score = Σ_a φ_a g_a(x)`.
pub trait ScoreFamily: Sync {
    fn param_count(&self) -> usize;

    /// Feature vectors `F_a` and divergence coefficients `g_a` at one state.
    fn features(&self, x: &[f64], cond: Option<&[f64]>) -> (Vec<Vec<f64>>, Vec<f64>);

    fn score_with(&self, phi: &[f64], x: &[f64], cond: Option<&[f64]>) -> Vec<f64> {
        let (f, _) = self.features(x, cond);
        let mut out = vec![0.0; x.len()];
        for (c, fa) in phi.iter().zip(&f) {
            out.iter_mut().zip(fa).for_each(|(o, v)| *o += c * v);
        }
        out
    }
}

/// Unconditional model on a periodic `side^dims` lattice.
#[derive(Debug, Clone)]
pub struct LinearScoreModel {
    basis: ScalarBasis,
    side: usize,
    dims: usize,
    shells: Vec<Shell>,
}

impl LinearScoreModel {
    pub fn new(basis: ScalarBasis, stencil_terms: usize, side: usize, dims: usize) -> Result<Self> {
        check_dims(dims)?;
        if !(1..=3).contains(&stencil_terms) {
            return Err(Error::config(format!("stencil terms must be 1, 2 or 3, got {stencil_terms}")));
        }
        if side == 0 {
            return Err(Error::shape("model side must be positive"));
        }
        let shells = (0..stencil_terms).map(|a| Shell::build(a, side, dims)).collect();
        Ok(LinearScoreModel { basis, side, dims, shells })
    }

    pub fn basis(&self) -> &ScalarBasis {
        &self.basis
    }

    pub fn stencil_terms(&self) -> usize {
        self.shells.len()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn dim(&self) -> usize {
        self.side.pow(self.dims as u32)
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::shape(format!("model expects {} values, got {}", self.dim(), x.len())));
        }
        Ok(())
    }

    fn check_params(&self, p: &LinearScoreParams) -> Result<()> {
        if p.stencil.len() != self.stencil_terms() || p.theta.len() != self.basis.len() {
            return Err(Error::shape("parameter sizes do not match the model"));
        }
        Ok(())
    }

    pub fn params(&self, phi: &[f64]) -> LinearScoreParams {
        LinearScoreParams::from_vec(phi, self.stencil_terms())
    }

    pub fn potential(&self, p: &LinearScoreParams, x: &[f64]) -> Result<f64> {
        self.check_state(x)?;
        self.check_params(p)?;
        let mut kx = vec![0.0; x.len()];
        for (c, s) in p.stencil.iter().zip(&self.shells) {
            s.apply_add(*c, x, &mut kx);
        }
        let quad = 0.5 * x.iter().zip(&kx).map(|(a, b)| a * b).sum::<f64>();
        let onsite: f64 = x
            .iter()
            .map(|v| p.theta.iter().zip(self.basis.functions()).map(|(t, f)| t * f.value(*v)).sum::<f64>())
            .sum();
        Ok(quad + onsite)
    }

    /// `Kx + Σ_i θ_i v_i'(x(u))`.
    pub fn score(&self, p: &LinearScoreParams, x: &[f64]) -> Result<Vec<f64>> {
        self.check_state(x)?;
        self.check_params(p)?;
        Ok(self.score_with(&p.to_vec(), x, None))
    }

    /// `Tr K + Σ_i θ_i Σ_u v_i''(x(u))`.
    pub fn laplacian(&self, p: &LinearScoreParams, x: &[f64]) -> Result<f64> {
        self.check_state(x)?;
        self.check_params(p)?;
        let (_, g) = self.features(x, None);
        Ok(p.to_vec().iter().zip(&g).map(|(a, b)| a * b).sum())
    }
}

impl ScoreFamily for LinearScoreModel {
    fn param_count(&self) -> usize {
        self.shells.len() + self.basis.len()
    }

    fn features(&self, x: &[f64], _cond: Option<&[f64]>) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut feats: Vec<Vec<f64>> = self.shells.iter().map(|s| s.apply(x)).collect();
        let mut g: Vec<f64> = self.shells.iter().map(|s| s.trace).collect();
        for f in self.basis.functions() {
            feats.push(x.iter().map(|v| f.d1(*v)).collect());
            g.push(x.iter().map(|v| f.d2(*v)).sum());
        }
        (feats, g)
    }

    fn score_with(&self, phi: &[f64], x: &[f64], _cond: Option<&[f64]>) -> Vec<f64> {
        let k = self.shells.len();
        let mut out = vec![0.0; x.len()];
        for (c, s) in phi[..k].iter().zip(&self.shells) {
            s.apply_add(*c, x, &mut out);
        }
        if !self.basis.is_empty() {
            for (o, v) in out.iter_mut().zip(x) {
                *o += phi[k..].iter().zip(self.basis.functions()).map(|(t, f)| t * f.d1(*v)).sum::<f64>();
            }
        }
        out
    }
}

/// Conditional family for detail coefficients x̄ given the low-pass field:
/// the score of the full-field model at `x = γ(Gᵀx_low + Ḡᵀx̄)`, pulled
/// back to x̄ as `γḠ ∇s(x)`.
#[derive(Debug, Clone)]
pub struct ProjectedConditionalModel {
    inner: LinearScoreModel,
    filters: FilterPair,
    gamma: f64,
    /// `diag(ḠᵀḠ)`.
    detail_weight: Vec<f64>,
    /// `Tr(Ḡ S_a Ḡᵀ)` per stencil shell.
    stencil_trace: Vec<f64>,
}

impl ProjectedConditionalModel {
    pub fn new(inner: LinearScoreModel, filters: FilterPair, gamma: f64) -> Result<Self> {
        if !inner.side.is_multiple_of(2) {
            return Err(Error::shape("conditional model needs an even fine side"));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::domain("normalizer must be positive"));
        }
        let (half, dims) = (inner.side / 2, inner.dims);
        let q = half.pow(dims as u32);
        let n_det = wavelet::channel_count(dims) * q;
        let low = vec![0.0; q];
        let mut detail_weight = vec![0.0; inner.dim()];
        let mut stencil_trace = vec![0.0; inner.shells.len()];
        let mut e = vec![0.0; n_det];
        for k in 0..n_det {
            e[k] = 1.0;
            let y = wavelet::synthesize_slice(&low, &e, half, dims, &filters)?;
            e[k] = 0.0;
            detail_weight.iter_mut().zip(&y).for_each(|(w, v)| *w += v * v);
            for (tr, s) in stencil_trace.iter_mut().zip(&inner.shells) {
                *tr += y.iter().zip(s.apply(&y)).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Ok(ProjectedConditionalModel { inner, filters, gamma, detail_weight, stencil_trace })
    }

    pub fn inner(&self) -> &LinearScoreModel {
        &self.inner
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn detail_len(&self) -> usize {
        self.inner.dim() / (1 << self.inner.dims) * wavelet::channel_count(self.inner.dims)
    }

    fn fine_state(&self, xbar: &[f64], x_low: &[f64]) -> Vec<f64> {
        wavelet::reconstruct_step(x_low, xbar, self.inner.side / 2, self.inner.dims, self.gamma, &self.filters)
            .expect("conditional state sizes")
    }

    fn project(&self, v: &[f64]) -> Vec<f64> {
        let (_, det) = wavelet::analyze_slice(v, self.inner.side, self.inner.dims, &self.filters).expect("fine side");
        det.into_iter().map(|d| d * self.gamma).collect()
    }
}

impl ScoreFamily for ProjectedConditionalModel {
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn features(&self, xbar: &[f64], cond: Option<&[f64]>) -> (Vec<Vec<f64>>, Vec<f64>) {
        let x = self.fine_state(xbar, cond.expect("conditional model needs the low-pass field"));
        let (feats, _) = self.inner.features(&x, None);
        let g2 = self.gamma * self.gamma;
        let mut g: Vec<f64> = self.stencil_trace.iter().map(|t| g2 * t).collect();
        for f in self.inner.basis.functions() {
            g.push(g2 * x.iter().zip(&self.detail_weight).map(|(v, w)| w * f.d2(*v)).sum::<f64>());
        }
        (feats.iter().map(|fa| self.project(fa)).collect(), g)
    }

    fn score_with(&self, phi: &[f64], xbar: &[f64], cond: Option<&[f64]>) -> Vec<f64> {
        let x = self.fine_state(xbar, cond.expect("conditional model needs the low-pass field"));
        self.project(&self.inner.score_with(phi, &x, None))
    }
}

/// `γ Ḡ ∇ log p(x)` at `x = γ(Gᵀx_low + Ḡᵀx̄)`: the conditional score of x̄
/// given `x_low` implied by a full-field score.
pub fn conditional_score_projected(
    full_score: &dyn ScoreFunction,
    f: &FilterPair,
    gamma: f64,
    t: f64,
    xbar: &[f64],
    x_low: &[f64],
    dims: usize,
) -> Result<Vec<f64>> {
    check_dims(dims)?;
    let half = (x_low.len() as f64).powf(1.0 / dims as f64).round() as usize;
    let x = wavelet::reconstruct_step(x_low, xbar, half, dims, gamma, f)?;
    let s = full_score.score(t, &x, None);
    if s.len() != x.len() {
        return Err(Error::shape("full score has the wrong length"));
    }
    let (_, det) = wavelet::analyze_slice(&s, 2 * half, dims, f)?;
    Ok(det.into_iter().map(|d| d * gamma).collect())
}

/// States to fit, with optional conditioning values kept clean during noising.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub states: Vec<Vec<f64>>,
    pub conds: Option<Vec<Vec<f64>>>,
}

impl TrainingSet {
    pub fn from_fields(fields: &[Field]) -> Self {
        TrainingSet { states: fields.iter().map(|f| f.as_slice().to_vec()).collect(), conds: None }
    }

    /// Detail coefficients x̄ = Ḡx/γ conditioned on x_low = Gx/γ, for fields
    /// at the finer of the two levels.
    pub fn conditional(fine: &[Field], f: &FilterPair, gamma: f64) -> Result<Self> {
        let mut states = Vec::with_capacity(fine.len());
        let mut conds = Vec::with_capacity(fine.len());
        let inv = 1.0 / gamma;
        for x in fine {
            let (low, det) = wavelet::analyze_slice(x.as_slice(), x.side(), x.dims(), f)?;
            states.push(det.into_iter().map(|v| v * inv).collect());
            conds.push(low.into_iter().map(|v| v * inv).collect());
        }
        Ok(TrainingSet { states, conds: Some(conds) })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn cond(&self, i: usize) -> Option<&[f64]> {
        self.conds.as_ref().map(|c| c[i].as_slice())
    }

    /// Forward-noised copy at time `t`; sample `i` draws from stream `i` of `seed`.
    pub fn noised(&self, t: f64, seed: u64) -> TrainingSet {
        let states = if t == 0.0 {
            self.states.clone()
        } else {
            self.states
                .par_iter()
                .enumerate()
                .map(|(i, x)| forward_noise(x, t, &mut rng::stream(seed, i as u64)))
                .collect()
        };
        TrainingSet { states, conds: self.conds.clone() }
    }
}

/// The loss `φᵀMφ + 2bᵀφ` of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticLoss {
    pub m: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl QuadraticLoss {
    pub fn from_batch<F: ScoreFamily + ?Sized>(family: &F, batch: &TrainingSet) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::config("score matching needs a non-empty batch"));
        }
        if batch.conds.as_ref().is_some_and(|c| c.len() != batch.len()) {
            return Err(Error::shape("conditioning values do not match the batch"));
        }
        let p = family.param_count();
        // Upper triangle of M followed by b.
        let sums = ordered_sum(batch.len(), p * p + p, |i, acc| {
            let (f, g) = family.features(&batch.states[i], batch.cond(i));
            for a in 0..p {
                for c in a..p {
                    acc[a * p + c] += f[a].iter().zip(&f[c]).map(|(u, v)| u * v).sum::<f64>();
                }
                acc[p * p + a] += g[a];
            }
        });
        let (m, b) = sums.split_at(p * p);
        let n = batch.len() as f64;
        let mut mm = DMatrix::from_row_slice(p, p, m) / n;
        for a in 0..p {
            for c in 0..a {
                mm[(a, c)] = mm[(c, a)];
            }
        }
        Ok(QuadraticLoss { m: mm, b: DVector::from_column_slice(b) / n })
    }

    pub fn value(&self, phi: &[f64]) -> f64 {
        let v = DVector::from_column_slice(phi);
        (v.transpose() * &self.m * &v)[(0, 0)] + 2.0 * self.b.dot(&v)
    }

    pub fn gradient(&self, phi: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(phi);
        ((&self.m * v + &self.b) * 2.0).as_slice().to_vec()
    }

    /// Minimizer `-M⁻¹b`; falls back to the minimum-norm solution when `M`
    /// is singular or badly conditioned. The flag reports the fallback.
    pub fn minimizer(&self) -> (Vec<f64>, bool) {
        let p = self.m.nrows();
        if p == 0 {
            return (vec![], false);
        }
        let eig = self.m.clone().symmetric_eigen();
        let top = eig.eigenvalues.amax();
        let well_posed = top > 0.0 && eig.eigenvalues.min() > 1e-12 * top;
        if well_posed {
            if let Some(ch) = self.m.clone().cholesky() {
                return ((-ch.solve(&self.b)).as_slice().to_vec(), false);
            }
        }
        warn!("score-matching Gram matrix is singular or ill-conditioned; using the minimum-norm solution");
        let tol = 1e-12 * top.max(f64::MIN_POSITIVE);
        let pinv = self.m.clone().pseudo_inverse(tol).expect("non-negative tolerance");
        ((-(pinv * &self.b)).as_slice().to_vec(), true)
    }
}

fn check_batch_params<F: ScoreFamily + ?Sized>(family: &F, phi: &[f64]) -> Result<()> {
    if phi.len() != family.param_count() {
        return Err(Error::shape(format!("{} parameters for a family of {}", phi.len(), family.param_count())));
    }
    Ok(())
}

/// Empirical `E[|score|² + 2 div score]`.
pub fn ism_loss<F: ScoreFamily + ?Sized>(family: &F, phi: &[f64], batch: &TrainingSet) -> Result<f64> {
    check_batch_params(family, phi)?;
    Ok(QuadraticLoss::from_batch(family, batch)?.value(phi))
}

pub fn ism_loss_grad<F: ScoreFamily + ?Sized>(family: &F, phi: &[f64], batch: &TrainingSet) -> Result<Vec<f64>> {
    check_batch_params(family, phi)?;
    Ok(QuadraticLoss::from_batch(family, batch)?.gradient(phi))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    pub phi: Vec<f64>,
    pub loss: f64,
    pub fallback: bool,
}

pub fn solve_least_squares<F: ScoreFamily + ?Sized>(family: &F, batch: &TrainingSet) -> Result<LeastSquares> {
    let q = QuadraticLoss::from_batch(family, batch)?;
    let (phi, fallback) = q.minimizer();
    Ok(LeastSquares { loss: q.value(&phi), phi, fallback })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub horizon: f64,
    pub time_steps: usize,
    pub learning_rate: f64,
    pub initial_iterations: usize,
    pub warm_iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            horizon: 5.0,
            time_steps: 2000,
            learning_rate: 0.01,
            initial_iterations: 10_000,
            warm_iterations: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) || !(self.learning_rate > 0.0) {
            return Err(Error::config("horizon and learning rate must be positive"));
        }
        if self.time_steps == 0 || self.initial_iterations == 0 || self.warm_iterations == 0 {
            return Err(Error::config("time steps and iteration counts must be positive"));
        }
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.time_steps).map(|i| self.horizon * i as f64 / self.time_steps as f64).collect()
    }
}

/// Consecutive loss increases that count as divergence.
pub const DIVERGENCE_PATIENCE: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentOutcome {
    pub loss: f64,
    pub iterations: usize,
}

/// Adam with default moment decays, run in coordinates `ψ_a = φ_a sqrt(M_aa / m)`
/// with `m` the geometric mean of the diagonal, so all parameters see the
/// same curvature along their own axis while the overall units are kept. Starts from `phi` with fresh moment estimates and leaves the best
/// iterate seen in `phi`. Stops early once the loss reaches `target` when one
/// is given. Returns `None` on divergence: a non-finite loss, or
/// [`DIVERGENCE_PATIENCE`] consecutive increases that end above the starting
/// loss.
pub fn gradient_descent(
    q: &QuadraticLoss,
    phi: &mut [f64],
    lr: f64,
    iterations: usize,
    target: Option<f64>,
) -> Option<DescentOutcome> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let diag: Vec<f64> = q.m.diagonal().iter().map(|d| if *d > 0.0 { *d } else { 1.0 }).collect();
    let mean_log = diag.iter().map(|d| d.ln()).sum::<f64>() / diag.len().max(1) as f64;
    let scale: Vec<f64> = diag.iter().map(|d| (0.5 * (mean_log - d.ln())).exp()).collect();
    let mut m1 = vec![0.0; phi.len()];
    let mut m2 = vec![0.0; phi.len()];
    let (mut b1, mut b2) = (1.0, 1.0);
    let start = q.value(phi);
    if !start.is_finite() {
        return None;
    }
    let mut x = phi.to_vec();
    let (mut loss, mut best) = (start, start);
    let mut rising = 0;
    let mut done = iterations;
    for it in 0..iterations {
        if target.is_some_and(|t| best <= t) {
            done = it;
            break;
        }
        let g = q.gradient(&x);
        b1 *= BETA1;
        b2 *= BETA2;
        for (i, p) in x.iter_mut().enumerate() {
            let gi = g[i] * scale[i];
            m1[i] = BETA1 * m1[i] + (1.0 - BETA1) * gi;
            m2[i] = BETA2 * m2[i] + (1.0 - BETA2) * gi * gi;
            let mh = m1[i] / (1.0 - b1);
            let vh = m2[i] / (1.0 - b2);
            *p -= scale[i] * lr * mh / (vh.sqrt() + EPS);
        }
        let next = q.value(&x);
        if !next.is_finite() {
            return None;
        }
        rising = if next > loss { rising + 1 } else { 0 };
        if rising >= DIVERGENCE_PATIENCE && next > start {
            return None;
        }
        loss = next;
        if loss < best {
            best = loss;
            phi.copy_from_slice(&x);
        }
    }
    Some(DescentOutcome { loss: best, iterations: done })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub time: f64,
    pub loss: f64,
    pub oracle_loss: f64,
    pub iterations: usize,
}

impl StepReport {
    /// `(loss - oracle) / |oracle|`.
    pub fn relative_gap(&self) -> f64 {
        (self.loss - self.oracle_loss) / self.oracle_loss.abs().max(f64::MIN_POSITIVE)
    }
}

/// Per-time parameters of a trained family, interpolated linearly in `t`.
#[derive(Debug, Clone)]
pub struct TrainedScore<F> {
    family: F,
    times: Vec<f64>,
    params: Vec<Vec<f64>>,
    reports: Vec<StepReport>,
}

/// Serializable parameter table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTable {
    pub stencil_terms: usize,
    pub basis: ScalarBasis,
    pub times: Vec<f64>,
    pub params: Vec<LinearScoreParams>,
    pub reports: Vec<StepReport>,
}

impl<F: ScoreFamily> TrainedScore<F> {
    pub fn new(family: F, times: Vec<f64>, params: Vec<Vec<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != params.len() || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("parameter table needs increasing times, one parameter set each"));
        }
        if params.iter().any(|p| p.len() != family.param_count()) {
            return Err(Error::shape("parameter set size does not match the family"));
        }
        Ok(TrainedScore { family, times, params, reports: vec![] })
    }

    pub fn family(&self) -> &F {
        &self.family
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn reports(&self) -> &[StepReport] {
        &self.reports
    }

    pub fn params_at(&self, t: f64) -> Vec<f64> {
        let n = self.times.len();
        if t <= self.times[0] || n == 1 {
            return self.params[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.params[n - 1].clone();
        }
        let k = self.times.partition_point(|s| *s <= t) - 1;
        let w = (t - self.times[k]) / (self.times[k + 1] - self.times[k]);
        self.params[k].iter().zip(&self.params[k + 1]).map(|(a, b)| (1.0 - w) * a + w * b).collect()
    }

    pub fn table(&self, stencil_terms: usize, basis: &ScalarBasis) -> ParamTable {
        ParamTable {
            stencil_terms,
            basis: basis.clone(),
            times: self.times.clone(),
            params: self.params.iter().map(|p| LinearScoreParams::from_vec(p, stencil_terms)).collect(),
            reports: self.reports.clone(),
        }
    }
}

impl<F: ScoreFamily> ScoreFunction for TrainedScore<F> {
    fn score(&self, t: f64, x: &[f64], cond: Option<&[f64]>) -> Vec<f64> {
        self.family.score_with(&self.params_at(t), x, cond)
    }
}

/// Fit the family at each grid time `iT/n`, `i = 0..=n`. The first time gets
/// `initial_iterations` of descent from zero; later times start from the
/// previous solution with `warm_iterations`.
pub fn train_schedule<F: ScoreFamily, R: Rng + ?Sized>(
    family: F,
    data: &TrainingSet,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainedScore<F>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let times = cfg.times();
    let seeds = rng::child_seeds(rng, times.len());
    let mut phi = vec![0.0; family.param_count()];
    let mut params = Vec::with_capacity(times.len());
    let mut reports = Vec::with_capacity(times.len());
    for (i, (&t, &seed)) in times.iter().zip(&seeds).enumerate() {
        let q = QuadraticLoss::from_batch(&family, &data.noised(t, seed))?;
        let iterations = if i == 0 { cfg.initial_iterations } else { cfg.warm_iterations };
        let out = gradient_descent(&q, &mut phi, cfg.learning_rate, iterations, None)
            .ok_or(Error::Training { time_index: i })?;
        let (oracle, _) = q.minimizer();
        reports.push(StepReport { time: t, loss: out.loss, oracle_loss: q.value(&oracle), iterations: out.iterations });
        params.push(phi.clone());
    }
    let mut trained = TrainedScore::new(family, times, params)?;
    trained.reports = reports;
    Ok(trained)
}
