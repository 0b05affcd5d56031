//! Result directory layout: manifest, effective config, CSV tables and
//! cached datasets.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::info;
use serde::Serialize;
use serde_json::{json, Value};

use wsgm::experiments::{DatasetSource, Generate, Phi4Dataset};
use wsgm::io;
use wsgm::phi4::{McmcParams, Phi4Config};

use crate::config::SeedSource;

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "-", env!("WSGM_GIT_DESCRIBE"));

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    experiment: &'a str,
    version: &'static str,
    seed: u64,
    seed_source: SeedSource,
    jobs: usize,
    config: &'a Value,
    started_unix: u64,
    status: &'a str,
    wall_time_secs: Option<f64>,
    outputs: &'a [String],
}

/// A run's output directory. The manifest is written on creation and
/// rewritten with the wall time and file list when the run finishes.
pub struct RunDir {
    dir: PathBuf,
    experiment: &'static str,
    seed: u64,
    seed_source: SeedSource,
    jobs: usize,
    config: Value,
    started: Instant,
    started_unix: u64,
    outputs: Vec<String>,
}

impl RunDir {
    pub fn create(
        dir: &Path,
        experiment: &'static str,
        seed: u64,
        seed_source: SeedSource,
        jobs: usize,
        config: Value,
    ) -> wsgm::Result<Self> {
        fs::create_dir_all(dir)?;
        let run = RunDir {
            dir: dir.to_path_buf(),
            experiment,
            seed,
            seed_source,
            jobs,
            config,
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            outputs: vec![],
        };
        io::write_json(&run.dir.join("config.json"), &run.config)?;
        run.write_manifest("running", None)?;
        Ok(run)
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    fn write_manifest(&self, status: &str, wall: Option<f64>) -> wsgm::Result<()> {
        let m = Manifest {
            experiment: self.experiment,
            version: VERSION,
            seed: self.seed,
            seed_source: self.seed_source,
            jobs: self.jobs,
            config: &self.config,
            started_unix: self.started_unix,
            status,
            wall_time_secs: wall,
            outputs: &self.outputs,
        };
        io::write_json(&self.dir.join("manifest.json"), &m)
    }

    pub fn csv<R: Serialize>(&mut self, name: &str, rows: &[R]) -> wsgm::Result<()> {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(csv_error)?;
        for r in rows {
            w.serialize(r).map_err(csv_error)?;
        }
        w.flush()?;
        self.outputs.push(name.into());
        info!("wrote {}", path.display());
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> wsgm::Result<()> {
        io::write_json(&self.dir.join(name), value)?;
        self.outputs.push(name.into());
        Ok(())
    }

    pub fn finish(self) -> wsgm::Result<f64> {
        let wall = self.started.elapsed().as_secs_f64();
        self.write_manifest("ok", Some(wall))?;
        Ok(wall)
    }
}

fn csv_error(e: csv::Error) -> wsgm::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => wsgm::Error::Io(e),
        other => wsgm::Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Reuses φ⁴ ensembles stored under `dir` when their sidecar matches the
/// requested sampler settings; otherwise samples and stores them.
pub struct CachedSource {
    dir: PathBuf,
}

impl CachedSource {
    pub fn new(dir: PathBuf) -> Self {
        CachedSource { dir }
    }
}

impl DatasetSource for CachedSource {
    fn phi4(&mut self, cfg: &Phi4Config, params: &McmcParams, seed: u64) -> wsgm::Result<Phi4Dataset> {
        let key = json!({"model": cfg, "mcmc": params, "seed": seed});
        let tag = wsgm::rng::stable_hash(key.to_string().as_bytes());
        let path = self.dir.join(format!("phi4_L{}_{tag:016x}.f64", cfg.side));
        if path.exists() {
            if let Ok((fields, meta)) = io::read_dataset(&path) {
                if meta.info.get("key") == Some(&key) {
                    info!("reusing dataset {}", path.display());
                    let acceptance_rate = meta.info["acceptance_rate"].as_f64().unwrap_or(f64::NAN);
                    return Ok(Phi4Dataset { fields, acceptance_rate });
                }
            }
        }
        let data = Generate.phi4(cfg, params, seed)?;
        fs::create_dir_all(&self.dir)?;
        io::write_dataset(&path, &data.fields, json!({"key": key, "acceptance_rate": data.acceptance_rate}))?;
        Ok(data)
    }
}
