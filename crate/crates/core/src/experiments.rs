//! End-to-end experiment drivers shared by the command-line runner and the
//! acceptance suite. Each driver is deterministic given its config and seed.

use log::{info, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::gauss_analysis::{
    covariance_expansion, covariance_recursion, kl_gaussians, leading_error_terms, spectrum_error, steps_to_error,
    ErrorCurve, SgmCurve, StepsToError, WsgmOneScaleCurve,
};
use crate::gauss_process::{build_spectrum, SpectrumNormalization, SpectrumSpec};
use crate::metrics::{self, CombinedError, Histogram};
use crate::phi4::{self, DomainStats, McmcParams, Moments, Phi4Config};
use crate::rng;
use crate::score_fit::{
    train_schedule, LinearScoreModel, ProjectedConditionalModel, ScalarBasis, TrainConfig, TrainedScore, TrainingSet,
};
use crate::sgm::{reverse_sample_batch, wsgm_sample, Cascade, Schedule, ScoreFunction};
use crate::wavelet::{self, FilterPair, NormalizerSet};

fn default_wavelet() -> String {
    "daubechies".into()
}

fn check_grid<T>(name: &str, grid: &[T]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::config(format!("{name} grid is empty")));
    }
    Ok(())
}

// ---------------------------------------------------------------- step counts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Fig2Config {
    pub sides: Vec<usize>,
    pub dims: usize,
    pub eta: f64,
    /// Spectral cutoff; `None` uses `2π/L` for each side.
    pub xi: Option<f64>,
    pub normalization: SpectrumNormalization,
    pub horizon: f64,
    pub eps: f64,
    pub steps: Vec<usize>,
    pub wavelet: String,
    pub q: usize,
    pub step_cap: usize,
}

impl Default for Fig2Config {
    fn default() -> Self {
        Fig2Config {
            sides: vec![16, 32, 64],
            dims: 1,
            eta: 1.0,
            xi: None,
            normalization: SpectrumNormalization::Raw,
            horizon: 10.0,
            eps: 0.1,
            steps: vec![12, 16, 24, 32, 48, 64, 96, 128, 192, 256, 384, 512, 768, 1024],
            wavelet: default_wavelet(),
            q: 4,
            step_cap: 1 << 17,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sgm,
    Wsgm,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Sgm => "sgm",
            Method::Wsgm => "wsgm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fig2Row {
    pub side: usize,
    pub method: Method,
    pub steps: usize,
    pub sup_error: f64,
    pub kl: f64,
    pub e_t: f64,
    pub e_delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fig2Summary {
    pub side: usize,
    pub method: Method,
    pub eps: f64,
    pub steps_to_eps: StepsToError,
}

impl Fig2Config {
    pub fn spec(&self, side: usize) -> SpectrumSpec {
        SpectrumSpec {
            eta: self.eta,
            xi: self.xi.unwrap_or(2.0 * std::f64::consts::PI / side as f64),
            side,
            dims: self.dims,
            normalization: self.normalization,
        }
    }

    fn validate(&self) -> Result<()> {
        check_grid("side", &self.sides)?;
        check_grid("step", &self.steps)?;
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::config("target error must lie in (0, 1)"));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::config("horizon must be positive"));
        }
        Ok(())
    }
}

/// Exact error-versus-steps curves of the plain and one-scale wavelet chains
/// on power-law Gaussian targets, plus the step count reaching `eps`.
pub fn fig2(cfg: &Fig2Config) -> Result<(Vec<Fig2Row>, Vec<Fig2Summary>)> {
    cfg.validate()?;
    let filters = wavelet::make_filters(&cfg.wavelet, cfg.q)?;
    let per_side: Vec<(Vec<Fig2Row>, Vec<Fig2Summary>)> =
        cfg.sides.par_iter().map(|&side| fig2_side(cfg, &filters, side)).collect::<Result<_>>()?;
    let mut rows = vec![];
    let mut summary = vec![];
    for (r, s) in per_side {
        rows.extend(r);
        summary.extend(s);
    }
    Ok((rows, summary))
}

fn fig2_side(cfg: &Fig2Config, filters: &FilterPair, side: usize) -> Result<(Vec<Fig2Row>, Vec<Fig2Summary>)> {
    let g = build_spectrum(&cfg.spec(side))?;
    let p = g.spectrum().to_vec();
    let zeros = vec![0.0; p.len()];
    let sgm = SgmCurve::new(p.clone(), cfg.horizon)?;
    let wsgm = WsgmOneScaleCurve::new(&g, filters, cfg.horizon)?;
    let mut rows = vec![];
    for &n in cfg.steps.iter().filter(|n| cfg.horizon / (**n as f64) < 1.0) {
        let delta = cfg.horizon / n as f64;
        let out = covariance_recursion(&p, &Schedule::new(cfg.horizon, n)?)?;
        let b = leading_error_terms(&p, cfg.horizon, delta)?;
        rows.push(Fig2Row {
            side,
            method: Method::Sgm,
            steps: n,
            sup_error: spectrum_error(&out, &p),
            kl: kl_gaussians(&zeros, &p, &zeros, &out)?,
            e_t: b.e_t,
            e_delta: b.e_delta,
        });
        let bw = leading_error_terms(wsgm.conditional_eigenvalues(), cfg.horizon, delta)?;
        rows.push(Fig2Row {
            side,
            method: Method::Wsgm,
            steps: n,
            sup_error: wsgm.error(n)?,
            kl: wsgm.kl(n)?,
            e_t: bw.e_t,
            e_delta: bw.e_delta,
        });
    }
    let summary = vec![
        Fig2Summary {
            side,
            method: Method::Sgm,
            eps: cfg.eps,
            steps_to_eps: steps_to_error(&sgm, cfg.eps, cfg.step_cap)?,
        },
        Fig2Summary {
            side,
            method: Method::Wsgm,
            eps: cfg.eps,
            steps_to_eps: steps_to_error(&wsgm, cfg.eps, cfg.step_cap)?,
        },
    ];
    info!("step counts for L={side}: {:?}", summary.iter().map(|s| s.steps_to_eps).collect::<Vec<_>>());
    Ok((rows, summary))
}

// ------------------------------------------------------------ schedule sweep

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualRatios {
    pub horizon: f64,
    pub delta: f64,
    pub kl: f64,
    pub e_t: f64,
    pub e_delta: f64,
    /// `|KL - E_T - E_δ| / (δ + e^{-4T})`.
    pub kl_ratio: f64,
    /// `‖Σ_N - Σ - δΣ_δ - e^{-4T}Σ_T‖ / (δ + e^{-4T})`.
    pub expansion_ratio: f64,
}

/// Residuals of the first-order error predictions at one `(T, δ)`.
pub fn residual_ratios(spectrum: &[f64], horizon: f64, delta: f64) -> Result<ResidualRatios> {
    let b = leading_error_terms(spectrum, horizon, delta)?;
    let sched = Schedule::with_step(horizon, delta)?;
    let delta = sched.step_size();
    let scale = delta + (-4.0 * horizon).exp();
    let out = covariance_recursion(spectrum, &sched)?;
    let terms = covariance_expansion(spectrum, &vec![0.0; spectrum.len()])?;
    let expansion = out
        .iter()
        .zip(spectrum)
        .zip(&terms)
        .map(|((h, p), e)| (h - p - delta * e.sigma_delta - (-4.0 * horizon).exp() * e.sigma_t).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(ResidualRatios {
        horizon,
        delta,
        kl: b.kl_exact,
        e_t: b.e_t,
        e_delta: b.e_delta,
        kl_ratio: b.residual.abs() / scale,
        expansion_ratio: expansion / scale,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub side: usize,
    pub dims: usize,
    pub eta: f64,
    pub xi: Option<f64>,
    pub normalization: SpectrumNormalization,
    /// δ-halving grid at fixed `horizon`.
    pub horizon: f64,
    pub deltas: Vec<f64>,
    /// T-doubling grid at fixed `delta`.
    pub delta: f64,
    pub horizons: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            side: 16,
            dims: 1,
            eta: 1.0,
            xi: None,
            normalization: SpectrumNormalization::TraceD,
            horizon: 6.0,
            deltas: vec![0.1, 0.05, 0.025, 0.0125],
            delta: 0.01,
            horizons: vec![0.25, 0.5, 1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `"delta"` or `"horizon"`: which quantity the row's grid varies.
    pub grid: &'static str,
    #[serde(flatten)]
    pub ratios: ResidualRatios,
}

pub fn schedule_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    check_grid("delta", &cfg.deltas)?;
    check_grid("horizon", &cfg.horizons)?;
    let spec = SpectrumSpec {
        eta: cfg.eta,
        xi: cfg.xi.unwrap_or(2.0 * std::f64::consts::PI / cfg.side as f64),
        side: cfg.side,
        dims: cfg.dims,
        normalization: cfg.normalization,
    };
    let p = build_spectrum(&spec)?.spectrum().to_vec();
    let mut rows = vec![];
    for &d in &cfg.deltas {
        rows.push(SweepRow { grid: "delta", ratios: residual_ratios(&p, cfg.horizon, d)? });
    }
    for &t in &cfg.horizons {
        rows.push(SweepRow { grid: "horizon", ratios: residual_ratios(&p, t, cfg.delta)? });
    }
    Ok(rows)
}

// -------------------------------------------------------------- wavelet check

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WaveletCheckConfig {
    pub wavelets: Vec<(String, usize)>,
    pub sides: Vec<usize>,
    pub dims: Vec<usize>,
    pub trials: usize,
    pub roundtrip_tol: f64,
    pub unitarity_tol: f64,
}

impl Default for WaveletCheckConfig {
    fn default() -> Self {
        WaveletCheckConfig {
            wavelets: vec![("haar".into(), 1), ("daubechies".into(), 4)],
            sides: vec![8, 16, 32, 64, 128],
            dims: vec![1, 2],
            trials: 3,
            roundtrip_tol: 1e-10,
            unitarity_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveletCheckRow {
    pub wavelet: String,
    pub side: usize,
    pub dims: usize,
    /// Worst `‖R(D(x)) - x‖ / ‖x‖` over full-depth decompositions.
    pub roundtrip: f64,
    /// Worst energy defect `|‖Wx‖² - ‖x‖²| / ‖x‖²` of the unnormalized transform.
    pub energy: f64,
    /// Worst adjointness defect `|⟨Wx, y⟩ - ⟨x, Wᵀy⟩| / (‖x‖‖y‖)`.
    pub adjoint: f64,
    pub pass: bool,
}

/// Round-trip and orthogonality checks over random fields.
pub fn wavelet_check(cfg: &WaveletCheckConfig, seed: u64) -> Result<Vec<WaveletCheckRow>> {
    check_grid("wavelet", &cfg.wavelets)?;
    check_grid("side", &cfg.sides)?;
    check_grid("dims", &cfg.dims)?;
    let mut jobs = vec![];
    for (name, q) in &cfg.wavelets {
        for &side in &cfg.sides {
            for &dims in &cfg.dims {
                jobs.push((name.clone(), *q, side, dims));
            }
        }
    }
    jobs.par_iter()
        .map(|(name, q, side, dims)| {
            let f = wavelet::make_filters(name, *q)?;
            let label = format!("{name}{q}/L={side}/{dims}d");
            let mut r = rng::seeded(rng::grid_seed(seed, &label));
            let d = side.pow(*dims as u32);
            let scales = wavelet::max_scales(*side);
            let (mut roundtrip, mut energy, mut adjoint) = (0.0f64, 0.0f64, 0.0f64);
            for _ in 0..cfg.trials {
                let x = Field::new(*side, *dims, (0..d).map(|_| r.gen_range(-1.0..1.0)).collect())?;
                let y = Field::new(*side, *dims, (0..d).map(|_| r.gen_range(-1.0..1.0)).collect())?;
                let norms = NormalizerSet { gamma: (0..scales).map(|_| r.gen_range(0.5..2.0)).collect() };
                let p = wavelet::decompose(&x, scales, &f, &norms)?;
                let back = wavelet::reconstruct(&p, &f)?;
                let err = back.as_slice().iter().zip(x.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                roundtrip = roundtrip.max((err / x.norm_sq()).sqrt());
                let px =
                    wavelet::flatten_pyramid(&wavelet::decompose(&x, scales, &f, &NormalizerSet::identity(scales))?);
                let ex = px.iter().map(|v| v * v).sum::<f64>();
                energy = energy.max((ex - x.norm_sq()).abs() / x.norm_sq());
                // One-level adjointness: ⟨(G x, Ḡ x), (a, b)⟩ = ⟨x, Gᵀa + Ḡᵀb⟩.
                let half = side / 2;
                let (lo, de) = wavelet::analyze_slice(x.as_slice(), *side, *dims, &f)?;
                let (a, b) = wavelet::analyze_slice(y.as_slice(), *side, *dims, &f)?;
                let synth = wavelet::synthesize_slice(&a, &b, half, *dims, &f)?;
                let lhs: f64 = lo.iter().zip(&a).chain(de.iter().zip(&b)).map(|(u, v)| u * v).sum();
                let rhs: f64 = x.as_slice().iter().zip(&synth).map(|(u, v)| u * v).sum();
                adjoint = adjoint.max((lhs - rhs).abs() / (x.norm_sq() * y.norm_sq()).sqrt());
            }
            let pass = roundtrip <= cfg.roundtrip_tol && energy <= cfg.unitarity_tol && adjoint <= cfg.unitarity_tol;
            Ok(WaveletCheckRow {
                wavelet: format!("{name}{q}"),
                side: *side,
                dims: *dims,
                roundtrip,
                energy,
                adjoint,
                pass,
            })
        })
        .collect()
}

// ------------------------------------------------------------ Hessian spectra

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HessianConfig {
    pub sides: Vec<usize>,
    pub beta: f64,
    pub samples: usize,
    pub chains: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub proposal_std: f64,
    pub wavelet: String,
    pub q: usize,
    pub bins: usize,
}

impl Default for HessianConfig {
    fn default() -> Self {
        HessianConfig {
            sides: vec![16, 32],
            beta: phi4::CRITICAL_BETA,
            samples: 64,
            chains: 16,
            burn_in: 1000,
            thinning: 20,
            proposal_std: 1.0,
            wavelet: default_wavelet(),
            q: 4,
            bins: 30,
        }
    }
}

/// MCMC settings producing at least `samples` fields from `chains` chains.
pub fn mcmc_params(samples: usize, chains: usize, burn_in: usize, thinning: usize, proposal_std: f64) -> McmcParams {
    let per_chain = samples.div_ceil(chains.max(1)).max(1);
    McmcParams { sweeps: burn_in + thinning * per_chain, burn_in, thinning, proposal_std, chains }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianSample {
    pub side: usize,
    pub domain: &'static str,
    pub index: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianSummary {
    pub side: usize,
    pub domain: &'static str,
    pub lambda_min: Moments,
    pub lambda_max: Moments,
    pub kappa: Moments,
    pub kappa_histogram: Histogram,
    pub acceptance_rate: f64,
}

fn domain_rows(side: usize, domain: &'static str, s: &DomainStats) -> Vec<HessianSample> {
    s.samples
        .iter()
        .enumerate()
        .map(|(index, sp)| HessianSample {
            side,
            domain,
            index,
            lambda_min: sp.lambda_min,
            lambda_max: sp.lambda_max,
            kappa: sp.kappa,
        })
        .collect()
}

fn domain_summary(side: usize, domain: &'static str, s: &DomainStats, bins: usize, acc: f64) -> Result<HessianSummary> {
    let k = s.kappa();
    let lo = k.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = k.iter().copied().fold(0.0, f64::max);
    let hist = Histogram::new(&k, lo, if hi > lo { hi } else { lo + 1.0 }, bins)?;
    Ok(HessianSummary {
        side,
        domain,
        lambda_min: Moments::of(&s.lambda_min()),
        lambda_max: Moments::of(&s.lambda_max()),
        kappa: Moments::of(&k),
        kappa_histogram: hist,
        acceptance_rate: acc,
    })
}

/// MCMC ensemble together with its sampler diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Phi4Dataset {
    pub fields: Vec<Field>,
    pub acceptance_rate: f64,
}

/// Where φ⁴ ensembles come from; lets callers cache them between runs.
pub trait DatasetSource {
    fn phi4(&mut self, cfg: &Phi4Config, params: &McmcParams, seed: u64) -> Result<Phi4Dataset>;
}

/// Always runs the sampler.
pub struct Generate;

impl DatasetSource for Generate {
    fn phi4(&mut self, cfg: &Phi4Config, params: &McmcParams, seed: u64) -> Result<Phi4Dataset> {
        let run = phi4::mcmc_sample(cfg, params, &mut rng::seeded(seed))?;
        Ok(Phi4Dataset { fields: run.fields, acceptance_rate: run.acceptance_rate })
    }
}

/// Pixel and wavelet-projected Hessian spectra over φ⁴ samples.
pub fn hessian_experiment(cfg: &HessianConfig, seed: u64) -> Result<(Vec<HessianSample>, Vec<HessianSummary>)> {
    hessian_experiment_with(cfg, seed, &mut Generate)
}

pub fn hessian_experiment_with(
    cfg: &HessianConfig,
    seed: u64,
    source: &mut dyn DatasetSource,
) -> Result<(Vec<HessianSample>, Vec<HessianSummary>)> {
    check_grid("side", &cfg.sides)?;
    let f = wavelet::make_filters(&cfg.wavelet, cfg.q)?;
    let mut samples = vec![];
    let mut summaries = vec![];
    if let Some(side) = cfg.sides.iter().find(|&&s| s > phi4::HESSIAN_CAP) {
        return Err(Error::resource(format!("side {side}: dense Hessians are capped at side {}", phi4::HESSIAN_CAP)));
    }
    for &side in &cfg.sides {
        let params = mcmc_params(cfg.samples, cfg.chains, cfg.burn_in, cfg.thinning, cfg.proposal_std);
        let mseed = rng::grid_seed(seed, &format!("hessian/L={side}"));
        let run = source.phi4(&Phi4Config::new(side, cfg.beta)?, &params, mseed)?;
        let data = &run.fields[..cfg.samples.min(run.fields.len())];
        let gamma = wavelet::estimate_normalizers(data, 1, &f)?.gamma[0];
        let stats = phi4::hessian_stats(data, cfg.beta, &f, gamma)?;
        samples.extend(domain_rows(side, "pixel", &stats.pixel));
        samples.extend(domain_rows(side, "wavelet", &stats.wavelet));
        summaries.push(domain_summary(side, "pixel", &stats.pixel, cfg.bins, run.acceptance_rate)?);
        summaries.push(domain_summary(side, "wavelet", &stats.wavelet, cfg.bins, run.acceptance_rate)?);
    }
    Ok((samples, summaries))
}

// ------------------------------------------------------------- φ⁴ generation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Fig3Config {
    pub sides: Vec<usize>,
    pub beta: f64,
    /// Training and reference ensemble size.
    pub samples: usize,
    pub chains: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub proposal_std: f64,
    pub train: TrainConfig,
    pub stencil_terms: usize,
    pub basis: ScalarBasis,
    pub steps: Vec<usize>,
    pub generated: usize,
    pub wavelet: String,
    pub q: usize,
    /// Side of the coarsest wavelet field.
    pub coarse_side: usize,
}

impl Default for Fig3Config {
    fn default() -> Self {
        Fig3Config {
            sides: vec![8, 16, 32],
            beta: phi4::CRITICAL_BETA,
            samples: 512,
            chains: 64,
            burn_in: 1000,
            thinning: 10,
            proposal_std: 1.0,
            train: TrainConfig::default(),
            stencil_terms: 3,
            basis: ScalarBasis::phi4(),
            steps: vec![8, 16, 32, 64, 128, 256],
            generated: 512,
            wavelet: default_wavelet(),
            q: 4,
            coarse_side: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fig3Row {
    pub side: usize,
    pub method: Method,
    pub steps: usize,
    pub d1: f64,
    pub d2: f64,
    pub total: f64,
    /// `D₁` divided by the number of frequencies.
    pub d1_per_mode: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig3SideReport {
    pub side: usize,
    pub acceptance_rate: f64,
    pub normalizers: Vec<f64>,
    pub split_half_floor: CombinedError,
    /// Worst `(loss - oracle)/|oracle|` over all fitted time steps and models.
    pub worst_training_gap: f64,
}

/// Fields at every level of a normalized cascade: `levels[0]` is the input,
/// `levels[j]` the low-pass field after `j` normalized analysis steps.
pub fn pyramid_levels(dataset: &[Field], f: &FilterPair, norms: &NormalizerSet) -> Result<Vec<Vec<Field>>> {
    let mut levels = vec![dataset.to_vec()];
    for &g in &norms.gamma {
        let next = levels
            .last()
            .expect("at least one level")
            .iter()
            .map(|x| {
                let (low, _) = wavelet::analyze_slice(x.as_slice(), x.side(), x.dims(), f)?;
                Field::new(x.side() / 2, x.dims(), low.into_iter().map(|v| v * (1.0 / g)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        levels.push(next);
    }
    Ok(levels)
}

/// Trained scores of a wavelet cascade: coarse model plus one conditional
/// model per scale (`details[j - 1]` for scale `j`).
pub struct CascadeModels {
    pub coarse: TrainedScore<LinearScoreModel>,
    pub details: Vec<TrainedScore<ProjectedConditionalModel>>,
    pub norms: NormalizerSet,
    pub filters: FilterPair,
    pub base_side: usize,
    pub dims: usize,
}

impl CascadeModels {
    pub fn cascade(&self) -> Cascade<'_> {
        Cascade {
            coarse: &self.coarse,
            details: self.details.iter().map(|d| d as &dyn ScoreFunction).collect(),
            filters: &self.filters,
            norms: &self.norms,
            base_side: self.base_side,
            dims: self.dims,
        }
    }

    pub fn worst_gap(&self) -> f64 {
        let c = self.coarse.reports().iter().map(|r| r.relative_gap());
        let d = self.details.iter().flat_map(|m| m.reports().iter().map(|r| r.relative_gap()));
        c.chain(d).fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn train_cascade<R: Rng + ?Sized>(
    dataset: &[Field],
    filters: &FilterPair,
    scales: usize,
    basis: &ScalarBasis,
    stencil_terms: usize,
    train: &TrainConfig,
    rng: &mut R,
) -> Result<CascadeModels> {
    let (base_side, dims) = crate::field::common_shape(dataset)?;
    let norms = wavelet::estimate_normalizers(dataset, scales, filters)?;
    let levels = pyramid_levels(dataset, filters, &norms)?;
    let coarse_side = base_side >> scales;
    let coarse_model = LinearScoreModel::new(basis.clone(), stencil_terms, coarse_side, dims)?;
    let coarse = train_schedule(coarse_model, &TrainingSet::from_fields(&levels[scales]), train, rng)?;
    let mut details = Vec::with_capacity(scales);
    for j in 1..=scales {
        let fine_side = base_side >> (j - 1);
        let inner = LinearScoreModel::new(basis.clone(), stencil_terms, fine_side, dims)?;
        let family = ProjectedConditionalModel::new(inner, filters.clone(), norms.gamma[j - 1])?;
        let set = TrainingSet::conditional(&levels[j - 1], filters, norms.gamma[j - 1])?;
        details.push(train_schedule(family, &set, train, rng)?);
    }
    Ok(CascadeModels { coarse, details, norms, filters: filters.clone(), base_side, dims })
}

fn to_fields(raw: Vec<Vec<f64>>, side: usize, dims: usize) -> Result<Vec<Field>> {
    raw.into_iter().map(|v| Field::new(side, dims, v)).collect()
}

fn score_row(
    side: usize,
    method: Method,
    steps: usize,
    outcome: Result<Vec<Field>>,
    p: &[f64],
    reference: &[Field],
) -> Result<Fig3Row> {
    let d = p.len() as f64;
    match outcome {
        Ok(gen) => {
            let e = metrics::combined_error(p, &gen, reference)?;
            Ok(Fig3Row {
                side,
                method,
                steps,
                d1: e.d1,
                d2: e.d2,
                total: e.total(),
                d1_per_mode: e.d1 / d,
                diverged: false,
            })
        }
        Err(Error::Divergence { step, stage }) => {
            warn!("{} sampler diverged at L={side}, N={steps} (reverse step {step}, {stage:?})", method.label());
            let inf = f64::INFINITY;
            Ok(Fig3Row { side, method, steps, d1: inf, d2: 1.0, total: inf, d1_per_mode: inf, diverged: true })
        }
        Err(e) => Err(e),
    }
}

/// φ⁴ generation error of the plain and wavelet chains against an MCMC
/// reference ensemble, over a grid of step counts.
pub fn fig3(cfg: &Fig3Config, seed: u64) -> Result<(Vec<Fig3Row>, Vec<Fig3SideReport>)> {
    fig3_with(cfg, seed, &mut Generate)
}

pub fn fig3_with(
    cfg: &Fig3Config,
    seed: u64,
    source: &mut dyn DatasetSource,
) -> Result<(Vec<Fig3Row>, Vec<Fig3SideReport>)> {
    check_grid("side", &cfg.sides)?;
    check_grid("step", &cfg.steps)?;
    if cfg.generated < 2 || cfg.samples < 2 {
        return Err(Error::config("fig3 needs at least two reference and two generated samples"));
    }
    let filters = wavelet::make_filters(&cfg.wavelet, cfg.q)?;
    let mut rows = vec![];
    let mut reports = vec![];
    for &side in &cfg.sides {
        if cfg.coarse_side == 0 || side % cfg.coarse_side != 0 || !(side / cfg.coarse_side).is_power_of_two() {
            return Err(Error::config(format!("side {side} is not a power-of-two multiple of the coarse side")));
        }
        let scales = (side / cfg.coarse_side).trailing_zeros() as usize;
        let seed_for = |what: &str| rng::grid_seed(seed, &format!("fig3/L={side}/{what}"));

        let params = mcmc_params(cfg.samples, cfg.chains, cfg.burn_in, cfg.thinning, cfg.proposal_std);
        let run = source.phi4(&Phi4Config::new(side, cfg.beta)?, &params, seed_for("mcmc"))?;
        let reference = &run.fields[..cfg.samples.min(run.fields.len())];
        let p = metrics::estimate_spectrum(reference)?;

        let d = side * side;
        let full = LinearScoreModel::new(cfg.basis.clone(), cfg.stencil_terms, side, 2)?;
        let sgm = train_schedule(
            full,
            &TrainingSet::from_fields(reference),
            &cfg.train,
            &mut rng::seeded(seed_for("train-sgm")),
        )?;
        let cascade = train_cascade(
            reference,
            &filters,
            scales,
            &cfg.basis,
            cfg.stencil_terms,
            &cfg.train,
            &mut rng::seeded(seed_for("train-wsgm")),
        )?;
        let worst_gap = sgm.reports().iter().map(|r| r.relative_gap()).fold(cascade.worst_gap(), f64::max);
        reports.push(Fig3SideReport {
            side,
            acceptance_rate: run.acceptance_rate,
            normalizers: cascade.norms.gamma.clone(),
            split_half_floor: metrics::split_half_floor(reference)?,
            worst_training_gap: worst_gap,
        });

        for &n in &cfg.steps {
            let sched = Schedule::new(cfg.train.horizon, n)?;
            let gen = reverse_sample_batch(&sgm, &sched, d, cfg.generated, seed_for(&format!("sample-sgm/N={n}")))
                .and_then(|raw| to_fields(raw, side, 2));
            rows.push(score_row(side, Method::Sgm, n, gen, &p, reference)?);

            let c = cascade.cascade();
            let wseed = seed_for(&format!("sample-wsgm/N={n}"));
            let gen: Result<Vec<Field>> = (0..cfg.generated)
                .into_par_iter()
                .map(|i| wsgm_sample(&c, &sched, &mut rng::stream(wseed, i as u64)))
                .collect();
            rows.push(score_row(side, Method::Wsgm, n, gen, &p, reference)?);
        }
        info!("fig3 L={side} done");
    }
    Ok((rows, reports))
}
