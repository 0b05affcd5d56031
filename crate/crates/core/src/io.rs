//! Dataset files: raw little-endian `f64` values plus a JSON sidecar.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{common_shape, Field};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub side: usize,
    pub dims: usize,
    pub count: usize,
    pub dtype: String,
    /// Free-form provenance such as the generating config.
    #[serde(default)]
    pub info: serde_json::Value,
}

const DTYPE: &str = "f64-le";

fn sidecar(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

/// Writes `path` (raw values, fields back to back) and `path` with a `.json`
/// extension (shape and provenance).
pub fn write_dataset(path: &Path, fields: &[Field], info: serde_json::Value) -> Result<()> {
    let (side, dims) = common_shape(fields)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    for f in fields {
        for v in f.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    let meta = DatasetMeta { side, dims, count: fields.len(), dtype: DTYPE.into(), info };
    write_json(&sidecar(path), &meta)
}

pub fn read_dataset(path: &Path) -> Result<(Vec<Field>, DatasetMeta)> {
    let meta: DatasetMeta = read_json(&sidecar(path))?;
    if meta.dtype != DTYPE {
        return Err(Error::config(format!("unsupported dataset dtype {}", meta.dtype)));
    }
    let bytes = fs::read(path)?;
    let d = meta.side.pow(meta.dims as u32);
    if bytes.len() != 8 * d * meta.count {
        return Err(Error::shape(format!(
            "{} holds {} bytes, sidecar promises {} fields of {d} values",
            path.display(),
            bytes.len(),
            meta.count
        )));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let fields = values
        .chunks(d.max(1))
        .take(meta.count)
        .map(|c| Field::new(meta.side, meta.dims, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((fields, meta))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
