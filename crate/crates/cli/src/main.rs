mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use serde::de::DeserializeOwned;
use serde::Serialize;

use wsgm::experiments::{self, Fig2Config, Fig3Config, HessianConfig, Method, SweepConfig, WaveletCheckConfig};
use wsgm::gauss_analysis::StepsToError;
use wsgm::Error;

use config::{Experiment, RunConfig, SEED_ENV};
use output::{CachedSource, RunDir};

#[derive(Parser)]
#[command(name = "wsgm", version = output::VERSION, about = "Score-based sampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact error-versus-steps curves on Gaussian targets.
    Fig2(Common),
    /// φ⁴ generation error of plain and wavelet samplers.
    Fig3(Common),
    /// Pixel and wavelet Hessian spectra over φ⁴ samples.
    HessianStats(Common),
    /// Wavelet round-trip and orthogonality checks.
    WaveletCheck(Common),
    /// Residuals of first-order error predictions along step and horizon grids.
    ScheduleSweep(Common),
}

#[derive(Args)]
struct Common {
    /// Flat JSON config.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory; overrides the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Domain(_) | Error::DegenerateData(_) | Error::Json(_) => 2,
        Error::Divergence { .. } | Error::Training { .. } => 3,
        Error::Resource(_) => 4,
        Error::Io(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> wsgm::Result<u8> {
    match cmd {
        Command::Fig2(c) => with_run(&c, Experiment::Fig2, run_fig2),
        Command::Fig3(c) => with_run(&c, Experiment::Fig3, run_fig3),
        Command::HessianStats(c) => with_run(&c, Experiment::HessianStats, run_hessian),
        Command::WaveletCheck(c) => with_run(&c, Experiment::WaveletCheck, run_wavelet_check),
        Command::ScheduleSweep(c) => with_run(&c, Experiment::ScheduleSweep, run_sweep),
    }
}

/// Loads the config, sets up the worker pool and output directory, runs the
/// experiment and finalizes the manifest. The body returns the exit code.
fn with_run<T, F>(c: &Common, experiment: Experiment, body: F) -> wsgm::Result<u8>
where
    T: DeserializeOwned + Serialize,
    F: FnOnce(&RunConfig<T>, &mut RunDir) -> wsgm::Result<u8>,
{
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg: RunConfig<T> = config::load(&c.config, experiment, env_seed.as_deref())?;
    let jobs = c.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        return Err(Error::Config("--jobs must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the worker pool: {e}")))?;
    let out =
        c.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("results").join(experiment.id()));
    let mut dir = RunDir::create(&out, experiment.id(), cfg.seed, cfg.seed_source, jobs, cfg.flat())?;
    info!("{} seed {} -> {}", experiment.id(), cfg.seed, out.display());
    let code = body(&cfg, &mut dir)?;
    let wall = dir.finish()?;
    info!("finished in {wall:.1}s");
    Ok(code)
}

#[derive(Serialize)]
struct StepsRow {
    side: usize,
    method: Method,
    eps: f64,
    outcome: &'static str,
    steps: f64,
}

fn run_fig2(cfg: &RunConfig<Fig2Config>, dir: &mut RunDir) -> wsgm::Result<u8> {
    let (rows, summary) = experiments::fig2(&cfg.params)?;
    dir.csv("fig2_curves.csv", &rows)?;
    let steps: Vec<StepsRow> = summary
        .iter()
        .map(|s| {
            let (outcome, steps) = match s.steps_to_eps {
                StepsToError::Reached(n) => ("reached", n as f64),
                StepsToError::Extrapolated(n) => ("extrapolated", n),
                StepsToError::Floor(e) => ("floor", e),
            };
            StepsRow { side: s.side, method: s.method, eps: s.eps, outcome, steps }
        })
        .collect();
    for s in &steps {
        println!("L={:<4} {:<5} N(eps={}) = {} ({})", s.side, s.method.label(), s.eps, s.steps, s.outcome);
    }
    dir.csv("fig2_steps.csv", &steps)?;
    Ok(0)
}

fn run_fig3(cfg: &RunConfig<Fig3Config>, dir: &mut RunDir) -> wsgm::Result<u8> {
    let mut source = CachedSource::new(dir.path().join("datasets"));
    let (rows, reports) = experiments::fig3_with(&cfg.params, cfg.seed, &mut source)?;
    dir.csv("fig3_errors.csv", &rows)?;
    dir.json("fig3_sides.json", &reports)?;
    Ok(0)
}

fn run_hessian(cfg: &RunConfig<HessianConfig>, dir: &mut RunDir) -> wsgm::Result<u8> {
    let mut source = CachedSource::new(dir.path().join("datasets"));
    let (samples, summaries) = experiments::hessian_experiment_with(&cfg.params, cfg.seed, &mut source)?;
    for s in &summaries {
        println!(
            "L={:<3} {:<7} kappa mean {:.3} std {:.3}  lambda_min {:.4}  lambda_max {:.3}",
            s.side, s.domain, s.kappa.mean, s.kappa.std, s.lambda_min.mean, s.lambda_max.mean
        );
    }
    dir.csv("hessian_samples.csv", &samples)?;
    dir.json("hessian_summary.json", &summaries)?;
    Ok(0)
}

fn run_wavelet_check(cfg: &RunConfig<WaveletCheckConfig>, dir: &mut RunDir) -> wsgm::Result<u8> {
    let rows = experiments::wavelet_check(&cfg.params, cfg.seed)?;
    for r in &rows {
        println!(
            "{} {:<12} L={:<4} {}d  roundtrip {:.2e}  energy {:.2e}  adjoint {:.2e}",
            if r.pass { "PASS" } else { "FAIL" },
            r.wavelet,
            r.side,
            r.dims,
            r.roundtrip,
            r.energy,
            r.adjoint
        );
    }
    dir.csv("wavelet_check.csv", &rows)?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    println!("{} of {} checks passed", rows.len() - failed, rows.len());
    Ok(if failed == 0 { 0 } else { 1 })
}

#[derive(Serialize)]
struct SweepCsvRow {
    grid: &'static str,
    horizon: f64,
    delta: f64,
    kl: f64,
    e_t: f64,
    e_delta: f64,
    kl_ratio: f64,
    expansion_ratio: f64,
}

fn run_sweep(cfg: &RunConfig<SweepConfig>, dir: &mut RunDir) -> wsgm::Result<u8> {
    let rows: Vec<SweepCsvRow> = experiments::schedule_sweep(&cfg.params)?
        .into_iter()
        .map(|r| SweepCsvRow {
            grid: r.grid,
            horizon: r.ratios.horizon,
            delta: r.ratios.delta,
            kl: r.ratios.kl,
            e_t: r.ratios.e_t,
            e_delta: r.ratios.e_delta,
            kl_ratio: r.ratios.kl_ratio,
            expansion_ratio: r.ratios.expansion_ratio,
        })
        .collect();
    dir.csv("schedule_sweep.csv", &rows)?;
    Ok(0)
}
