//! Flat JSON run configs: `experiment`, `seed` and `out` plus the keys of the
//! experiment's own parameter struct.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use wsgm::Error;

pub const SEED_ENV: &str = "WSGM_SEED";

const RESERVED: [&str; 3] = ["experiment", "seed", "out"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Fig2,
    Fig3,
    HessianStats,
    WaveletCheck,
    ScheduleSweep,
}

impl Experiment {
    pub fn id(self) -> &'static str {
        match self {
            Experiment::Fig2 => "fig2-gaussian",
            Experiment::Fig3 => "fig3-phi4",
            Experiment::HessianStats => "hessian-stats",
            Experiment::WaveletCheck => "wavelet-check",
            Experiment::ScheduleSweep => "schedule-sweep",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedSource {
    Config,
    Environment,
}

#[derive(Debug, Clone)]
pub struct RunConfig<T> {
    pub experiment: Experiment,
    pub seed: u64,
    pub seed_source: SeedSource,
    pub out: Option<PathBuf>,
    pub params: T,
}

impl<T: Serialize> RunConfig<T> {
    /// The effective flat config; feeding it back reproduces the run.
    pub fn flat(&self) -> Value {
        let mut map = match serde_json::to_value(&self.params).expect("config serializes") {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        map.insert("experiment".into(), self.experiment.id().into());
        map.insert("seed".into(), self.seed.into());
        if let Some(out) = &self.out {
            map.insert("out".into(), out.display().to_string().into());
        }
        Value::Object(map)
    }
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub fn load<T>(path: &Path, experiment: Experiment, env_seed: Option<&str>) -> wsgm::Result<RunConfig<T>>
where
    T: DeserializeOwned + Serialize,
{
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| config_error(format!("invalid JSON in {}: {e}", path.display())))?;
    parse(value, experiment, env_seed)
}

pub fn parse<T>(value: Value, experiment: Experiment, env_seed: Option<&str>) -> wsgm::Result<RunConfig<T>>
where
    T: DeserializeOwned + Serialize,
{
    let Value::Object(mut map) = value else {
        return Err(config_error("config must be a JSON object"));
    };
    if let Some(id) = map.remove("experiment") {
        if id.as_str() != Some(experiment.id()) {
            return Err(config_error(format!("config is for experiment {id}, not {}", experiment.id())));
        }
    }
    let config_seed = match map.remove("seed") {
        Some(v) => Some(v.as_u64().ok_or_else(|| config_error("seed must be a non-negative integer"))?),
        None => None,
    };
    let (seed, seed_source) = match env_seed {
        Some(s) => (
            s.trim()
                .parse::<u64>()
                .map_err(|_| config_error(format!("{SEED_ENV}={s} is not a non-negative integer")))?,
            SeedSource::Environment,
        ),
        None => (config_seed.ok_or_else(|| config_error("config must set an explicit seed"))?, SeedSource::Config),
    };
    let out = match map.remove("out") {
        Some(Value::String(s)) => Some(PathBuf::from(s)),
        Some(other) => return Err(config_error(format!("out must be a string, got {other}"))),
        None => None,
    };
    let keys: Vec<String> = map.keys().cloned().collect();
    let params: T =
        serde_json::from_value(Value::Object(map)).map_err(|e| config_error(format!("bad parameter: {e}")))?;
    let known = serde_json::to_value(&params).expect("config serializes");
    for k in keys {
        if RESERVED.contains(&k.as_str()) || known.get(&k).is_none() {
            return Err(config_error(format!("unknown config key {k:?} for {}", experiment.id())));
        }
    }
    Ok(RunConfig { experiment, seed, seed_source, out, params })
}
