//! Discrete Fourier helpers for periodic 1D and 2D grids.
//!
//! Transforms are unnormalized in both directions (`ifft(fft(x)) = N x`),
//! matching `rustfft`. Spectra are stored in FFT order: index `m` stands for
//! the wrapped integer frequency returned by [`wrapped`].

use std::cell::RefCell;
use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Wrapped integer frequency of FFT index `m`, in `{-L/2, ..., L/2 - 1}`.
pub fn wrapped(m: usize, side: usize) -> i64 {
    if m < side / 2 || side == 1 {
        m as i64
    } else {
        m as i64 - side as i64
    }
}

/// Euclidean norm of the angular frequency `2π m / L` for every grid index.
pub fn frequency_norms(side: usize, dims: usize) -> Vec<f64> {
    let scale = 2.0 * PI / side as f64;
    let axis: Vec<f64> = (0..side).map(|m| wrapped(m, side) as f64 * scale).collect();
    match dims {
        1 => axis.iter().map(|w| w.abs()).collect(),
        _ => {
            let mut out = Vec::with_capacity(side * side);
            for a in &axis {
                for b in &axis {
                    out.push((a * a + b * b).sqrt());
                }
            }
            out
        }
    }
}

/// Angular frequency vector of grid index `idx`.
pub fn frequency_vector(idx: usize, side: usize, dims: usize) -> [f64; 2] {
    let scale = 2.0 * PI / side as f64;
    match dims {
        1 => [wrapped(idx, side) as f64 * scale, 0.0],
        _ => [wrapped(idx / side, side) as f64 * scale, wrapped(idx % side, side) as f64 * scale],
    }
}

/// Index of the frequency `-ω` for grid index `idx`.
pub fn negated_index(idx: usize, side: usize, dims: usize) -> usize {
    let neg = |m: usize| (side - m) % side;
    match dims {
        1 => neg(idx),
        _ => neg(idx / side) * side + neg(idx % side),
    }
}

fn transform_axis(buf: &mut [Complex64], side: usize, dims: usize, direction: FftDirection) {
    PLANNER.with(|p| {
        let fft = p.borrow_mut().plan_fft(side, direction);
        match dims {
            1 => fft.process(buf),
            _ => {
                // Rows are contiguous; columns go through a scratch transpose.
                fft.process(buf);
                let mut col = vec![Complex64::new(0.0, 0.0); side * side];
                for i in 0..side {
                    for j in 0..side {
                        col[j * side + i] = buf[i * side + j];
                    }
                }
                fft.process(&mut col);
                for i in 0..side {
                    for j in 0..side {
                        buf[i * side + j] = col[j * side + i];
                    }
                }
            }
        }
    });
}

pub fn fft(x: &[f64], side: usize, dims: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform_axis(&mut buf, side, dims, FftDirection::Forward);
    buf
}

pub fn fft_complex(buf: &mut [Complex64], side: usize, dims: usize) {
    transform_axis(buf, side, dims, FftDirection::Forward);
}

/// Unnormalized inverse transform in place.
pub fn ifft(buf: &mut [Complex64], side: usize, dims: usize) {
    transform_axis(buf, side, dims, FftDirection::Inverse);
}

/// Apply a real, even Fourier multiplier `m(ω)` to a real field.
pub fn apply_multiplier(x: &[f64], side: usize, dims: usize, mult: &[f64]) -> Vec<f64> {
    let mut buf = fft(x, side, dims);
    for (c, m) in buf.iter_mut().zip(mult) {
        *c *= *m;
    }
    ifft(&mut buf, side, dims);
    let n = buf.len() as f64;
    buf.iter().map(|c| c.re / n).collect()
}
