//! φ⁴ lattice model on an `L×L` periodic grid:
//!
//! ```text
//! E(x) = (β/2) Σ_{|u-v|=1} (x(u) - x(v))² + Σ_u (x(u)² - 1)²
//! ```
//!
//! with the first sum over ordered neighbor pairs, so each lattice edge
//! carries weight β.

use log::info;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{common_shape, Field};
use crate::rng;
use crate::wavelet::{self, FilterPair};

pub const CRITICAL_BETA: f64 = 0.68;

/// Largest side for dense pixel Hessians.
pub const HESSIAN_CAP: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phi4Config {
    pub side: usize,
    pub beta: f64,
}

impl Phi4Config {
    pub fn new(side: usize, beta: f64) -> Result<Self> {
        let c = Phi4Config { side, beta };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < 4 || !self.side.is_multiple_of(2) {
            return Err(Error::config(format!("lattice side must be even and at least 4, got {}", self.side)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!("coupling must be non-negative, got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcParams {
    pub sweeps: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub proposal_std: f64,
    /// Independent chains, each started from i.i.d. standard normal sites.
    pub chains: usize,
}

impl McmcParams {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.sweeps {
            return Err(Error::config("burn-in must be shorter than the run"));
        }
        if self.thinning == 0 || self.chains == 0 {
            return Err(Error::config("thinning and chain count must be positive"));
        }
        if !(self.proposal_std > 0.0) {
            return Err(Error::config("proposal width must be positive"));
        }
        Ok(())
    }

    pub fn samples_per_chain(&self) -> usize {
        (self.sweeps - self.burn_in) / self.thinning
    }
}

fn check_lattice(x: &Field) -> Result<usize> {
    if x.dims() != 2 {
        return Err(Error::shape("φ⁴ fields are two-dimensional"));
    }
    Ok(x.side())
}

#[inline]
fn neighbors(i: usize, j: usize, l: usize) -> [usize; 4] {
    [((i + 1) % l) * l + j, ((i + l - 1) % l) * l + j, i * l + (j + 1) % l, i * l + (j + l - 1) % l]
}

fn potential(v: f64) -> f64 {
    let s = v * v - 1.0;
    s * s
}

pub fn energy(x: &Field, beta: f64) -> Result<f64> {
    let l = check_lattice(x)?;
    let v = x.as_slice();
    let mut coupling = 0.0;
    let mut pot = 0.0;
    for i in 0..l {
        for j in 0..l {
            let u = v[i * l + j];
            // Each edge once (right and down neighbors).
            coupling += (u - v[((i + 1) % l) * l + j]).powi(2) + (u - v[i * l + (j + 1) % l]).powi(2);
            pot += potential(u);
        }
    }
    Ok(beta * coupling + pot)
}

pub fn grad_energy(x: &Field, beta: f64) -> Result<Field> {
    let l = check_lattice(x)?;
    let v = x.as_slice();
    let mut g = vec![0.0; v.len()];
    for i in 0..l {
        for j in 0..l {
            let u = i * l + j;
            let nb: f64 = neighbors(i, j, l).iter().map(|&k| v[k]).sum();
            g[u] = 2.0 * beta * (4.0 * v[u] - nb) + 4.0 * v[u] * (v[u] * v[u] - 1.0);
        }
    }
    Field::new(l, 2, g)
}

/// Coupling part `K = 2β (4 Id - adjacency)` of the Hessian of `E`.
pub fn coupling_matrix(side: usize, beta: f64) -> Result<DMatrix<f64>> {
    if side > HESSIAN_CAP {
        return Err(Error::resource(format!("dense Hessian for side {side} exceeds the cap {HESSIAN_CAP}")));
    }
    let d = side * side;
    let mut k = DMatrix::zeros(d, d);
    for i in 0..side {
        for j in 0..side {
            let u = i * side + j;
            k[(u, u)] += 8.0 * beta;
            for nb in neighbors(i, j, side) {
                k[(u, nb)] -= 2.0 * beta;
            }
        }
    }
    Ok(k)
}

/// `-∇² log p(x) = K + diag(12 x² - 4)`.
pub fn hessian_logp(x: &Field, beta: f64) -> Result<DMatrix<f64>> {
    let l = check_lattice(x)?;
    let mut h = coupling_matrix(l, beta)?;
    for (u, v) in x.as_slice().iter().enumerate() {
        h[(u, u)] += 12.0 * v * v - 4.0;
    }
    Ok(h)
}

/// Hessian-vector product without forming the matrix.
pub fn apply_hessian(x: &[f64], side: usize, beta: f64, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for i in 0..side {
        for j in 0..side {
            let u = i * side + j;
            let nb: f64 = neighbors(i, j, side).iter().map(|&k| v[k]).sum();
            out[u] = 2.0 * beta * (4.0 * v[u] - nb) + (12.0 * x[u] * x[u] - 4.0) * v[u];
        }
    }
    out
}

/// `γ² Ḡ (K + ∇²V(x)) Ḡᵀ`, the Hessian of the conditional log-density of
/// the normalized first-scale details.
pub fn projected_hessian(x: &Field, beta: f64, f: &FilterPair, gamma: f64) -> Result<DMatrix<f64>> {
    let l = check_lattice(x)?;
    if l * l > wavelet::DENSE_CAP {
        return Err(Error::resource(format!("projected Hessian for side {l} exceeds the dense cap")));
    }
    let half = l / 2;
    let nd = 3 * half * half;
    let low = vec![0.0; half * half];
    let g2 = gamma * gamma;
    let cols: Vec<Vec<f64>> = (0..nd)
        .map(|c| {
            let mut det = vec![0.0; nd];
            det[c] = 1.0;
            let up = wavelet::synthesize_slice(&low, &det, half, 2, f)?;
            let hv = apply_hessian(x.as_slice(), l, beta, &up);
            let (_, d) = wavelet::analyze_slice(&hv, l, 2, f)?;
            Ok(d.into_iter().map(|v| v * g2).collect())
        })
        .collect::<Result<_>>()?;
    let mut m = DMatrix::from_fn(nd, nd, |r, c| cols[c][r]);
    m = (&m + m.transpose()) * 0.5;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcRun {
    pub fields: Vec<Field>,
    /// Energy of every kept field, in chain order.
    pub energies: Vec<f64>,
    pub acceptance_rate: f64,
}

fn run_chain(cfg: &Phi4Config, params: &McmcParams, seed: u64) -> (Vec<Field>, Vec<f64>, u64, u64) {
    let l = cfg.side;
    let beta = cfg.beta;
    let mut r = rng::seeded(seed);
    let mut x: Vec<f64> = (0..l * l).map(|_| r.sample(StandardNormal)).collect();
    let (mut accepted, mut proposed) = (0u64, 0u64);
    let mut fields = Vec::with_capacity(params.samples_per_chain());
    let mut energies = Vec::with_capacity(params.samples_per_chain());
    for sweep in 1..=params.sweeps {
        for i in 0..l {
            for j in 0..l {
                let u = i * l + j;
                let old = x[u];
                let new = old + params.proposal_std * r.sample::<f64, _>(StandardNormal);
                let nb = neighbors(i, j, l);
                let mut d_e = potential(new) - potential(old);
                for k in nb {
                    d_e += beta * ((new - x[k]).powi(2) - (old - x[k]).powi(2));
                }
                proposed += 1;
                if d_e <= 0.0 || r.gen::<f64>() < (-d_e).exp() {
                    x[u] = new;
                    accepted += 1;
                }
            }
        }
        if sweep > params.burn_in && (sweep - params.burn_in).is_multiple_of(params.thinning) {
            let f = Field::new(l, 2, x.clone()).expect("lattice shape");
            energies.push(energy(&f, beta).expect("lattice"));
            fields.push(f);
        }
    }
    (fields, energies, accepted, proposed)
}

/// Single-site random-walk Metropolis targeting `e^{-E}`. Chains run in
/// parallel with seeds drawn from `rng`; output is ordered chain by chain.
pub fn mcmc_sample<R: Rng + ?Sized>(cfg: &Phi4Config, params: &McmcParams, rng: &mut R) -> Result<McmcRun> {
    cfg.validate()?;
    params.validate()?;
    let seeds = rng::child_seeds(rng, params.chains);
    let runs: Vec<_> = seeds.par_iter().map(|&s| run_chain(cfg, params, s)).collect();
    let mut out = McmcRun { fields: vec![], energies: vec![], acceptance_rate: 0.0 };
    let (mut acc, mut prop) = (0u64, 0u64);
    for (f, e, a, p) in runs {
        out.fields.extend(f);
        out.energies.extend(e);
        acc += a;
        prop += p;
    }
    out.acceptance_rate = acc as f64 / prop as f64;
    info!(
        "phi4 L={} beta={}: {} fields from {} chains, acceptance {:.3}",
        cfg.side,
        cfg.beta,
        out.fields.len(),
        params.chains,
        out.acceptance_rate
    );
    Ok(out)
}

/// Extreme eigenvalues and the condition number `max|λ| / min|λ|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub kappa: f64,
}

pub fn spectrum_summary(eigenvalues: &[f64]) -> Spectrum {
    let lambda_min = eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let lambda_max = eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let amax = eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let amin = eigenvalues.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    Spectrum { lambda_min, lambda_max, kappa: amax / amin }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

impl Moments {
    pub fn of(values: &[f64]) -> Moments {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Moments { mean, std: var.sqrt() }
    }

    pub fn relative_dispersion(&self) -> f64 {
        self.std / self.mean.abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub samples: Vec<Spectrum>,
}

impl DomainStats {
    pub fn lambda_min(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.lambda_min).collect()
    }

    pub fn lambda_max(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.lambda_max).collect()
    }

    pub fn kappa(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.kappa).collect()
    }

    pub fn kappa_moments(&self) -> Moments {
        Moments::of(&self.kappa())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianStats {
    pub pixel: DomainStats,
    pub wavelet: DomainStats,
}

/// Pixel and projected Hessian spectra over a dataset.
pub fn hessian_stats(dataset: &[Field], beta: f64, f: &FilterPair, gamma: f64) -> Result<HessianStats> {
    let (side, dims) = common_shape(dataset)?;
    if dims != 2 || side > HESSIAN_CAP {
        return Err(Error::resource(format!("Hessian statistics need 2D fields of side ≤ {HESSIAN_CAP}")));
    }
    let pairs: Vec<(Spectrum, Spectrum)> = dataset
        .par_iter()
        .map(|x| {
            let hp = hessian_logp(x, beta)?.symmetric_eigenvalues();
            let hw = projected_hessian(x, beta, f, gamma)?.symmetric_eigenvalues();
            Ok((spectrum_summary(hp.as_slice()), spectrum_summary(hw.as_slice())))
        })
        .collect::<Result<_>>()?;
    let (pixel, wavelet) = pairs.into_iter().unzip();
    Ok(HessianStats { pixel: DomainStats { samples: pixel }, wavelet: DomainStats { samples: wavelet } })
}
