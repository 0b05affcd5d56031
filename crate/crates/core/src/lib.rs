//! Score-based generative sampling on periodic fields, with a wavelet
//! cascade variant, exact analysis tools for stationary Gaussian targets and a
//! φ⁴ lattice pipeline.
//!
//! The reverse sampler, the wavelet transform and the fitted score models all
//! work on flat `f64` buffers wrapped in [`Field`]; multi-channel detail
//! coefficients are stored as one contiguous buffer, channel by channel.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiments;
pub mod field;
pub mod fourier;
pub mod gauss_analysis;
pub mod gauss_process;
pub mod io;
pub mod metrics;
pub mod phi4;
pub mod rng;
pub mod score_fit;
pub mod sgm;
pub mod wavelet;

pub use error::{Error, Result};
pub use field::Field;
