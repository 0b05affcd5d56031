use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// A real field on a periodic grid of `side^dims` sites, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    side: usize,
    dims: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn new(side: usize, dims: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        if side == 0 {
            return Err(Error::shape("field side must be positive"));
        }
        if data.len() != side.pow(dims as u32) {
            return Err(Error::shape(format!(
                "field of side {side} in {dims}D needs {} values, got {}",
                side.pow(dims as u32),
                data.len()
            )));
        }
        Ok(Field { side, dims, data })
    }

    pub fn zeros(side: usize, dims: usize) -> Self {
        Field { side, dims, data: vec![0.0; side.pow(dims as u32)] }
    }

    pub fn constant(side: usize, dims: usize, value: f64) -> Self {
        Field { side, dims, data: vec![value; side.pow(dims as u32)] }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn same_shape(&self, other: &Field) -> bool {
        self.side == other.side && self.dims == other.dims
    }

    /// Periodic translation by `shift` sites along every axis.
    pub fn shifted(&self, shift: &[isize]) -> Field {
        let l = self.side as isize;
        let wrap = |i: isize| (((i % l) + l) % l) as usize;
        let mut out = vec![0.0; self.data.len()];
        match self.dims {
            1 => {
                for (i, v) in self.data.iter().enumerate() {
                    out[wrap(i as isize + shift[0])] = *v;
                }
            }
            _ => {
                for i in 0..self.side {
                    for j in 0..self.side {
                        let (a, b) = (wrap(i as isize + shift[0]), wrap(j as isize + shift[1]));
                        out[a * self.side + b] = self.data[i * self.side + j];
                    }
                }
            }
        }
        Field { side: self.side, dims: self.dims, data: out }
    }
}

/// Sum of per-item accumulations into a `len`-vector. Items are processed in
/// parallel over fixed chunks and the partial sums combined in index order,
/// so the result does not depend on the thread count.
pub(crate) fn ordered_sum<F>(n: usize, len: usize, item: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    const CHUNK: usize = 16;
    let parts: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; len];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                item(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; len];
    for part in parts {
        total.iter_mut().zip(part).for_each(|(a, b)| *a += b);
    }
    total
}

pub(crate) fn check_dims(dims: usize) -> Result<()> {
    if dims == 1 || dims == 2 {
        Ok(())
    } else {
        Err(Error::shape(format!("only 1D and 2D fields are supported, got {dims}D")))
    }
}

/// Check that every field of a collection has the same shape; returns (side, dims).
pub(crate) fn common_shape(fields: &[Field]) -> Result<(usize, usize)> {
    let first = fields.first().ok_or_else(|| Error::config("empty dataset"))?;
    if fields.iter().any(|f| !f.same_shape(first)) {
        return Err(Error::shape("dataset fields have mixed shapes"));
    }
    Ok((first.side, first.dims))
}
