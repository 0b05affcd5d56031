//! Periodic orthogonal wavelet analysis and synthesis in 1D and 2D.
//!
//! One analysis step maps a field of side `L` to a low-pass field of side
//! `L/2` and `2^n - 1` detail channels of side `L/2`:
//!
//! ```text
//! low[k]    = Σ_m g[m] x[(2k + m) mod L]
//! detail[k] = Σ_m h[m] x[(2k + m) mod L],   h[m] = (-1)^m g[M-1-m]
//! ```
//!
//! In 2D the filters act separably; detail channels are ordered
//! (horizontal, vertical, diagonal) = (g⊗h, h⊗g, h⊗h), where the first
//! factor filters along rows-of-the-grid (axis 0).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{check_dims, common_shape, Field};

/// Largest grid handled by the dense operator forms, in sites.
pub const DENSE_CAP: usize = 4096;

// Extremal-phase Daubechies low-pass filters, indexed by vanishing moments.
#[allow(clippy::excessive_precision)]
const DB2: [f64; 4] = [
    0.482_962_913_144_534_143_4,
    0.836_516_303_737_807_905_6,
    0.224_143_868_042_013_381_0,
    -0.129_409_522_551_260_381_2,
];

#[allow(clippy::excessive_precision)]
const DB3: [f64; 6] = [
    0.332_670_552_950_082_616_0,
    0.806_891_509_311_092_576_5,
    0.459_877_502_118_491_570_1,
    -0.135_011_020_010_254_588_7,
    -0.085_441_273_882_026_661_69,
    0.035_226_291_885_709_536_60,
];

#[allow(clippy::excessive_precision)]
const DB4: [f64; 8] = [
    0.230_377_813_308_896_500_9,
    0.714_846_570_552_915_647_1,
    0.630_880_767_929_858_907_9,
    -0.027_983_769_416_859_854_21,
    -0.187_034_811_719_093_084_1,
    0.030_841_381_835_560_763_63,
    0.032_883_011_666_885_199_74,
    -0.010_597_401_785_069_032_11,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterPair {
    name: String,
    vanishing_moments: usize,
    lowpass: Vec<f64>,
    highpass: Vec<f64>,
}

/// Build a filter pair by family name: `haar` or `daubechies` with `q ∈ {2, 3, 4}`.
/// The vanishing-moment count is ignored for Haar.
pub fn make_filters(name: &str, q: usize) -> Result<FilterPair> {
    let (lowpass, q, name) = match name.to_ascii_lowercase().as_str() {
        "haar" => (vec![std::f64::consts::FRAC_1_SQRT_2; 2], 1, "haar".to_string()),
        "daubechies" | "db" => {
            let g = match q {
                2 => DB2.to_vec(),
                3 => DB3.to_vec(),
                4 => DB4.to_vec(),
                _ => return Err(Error::config(format!("daubechies filters need q in {{2, 3, 4}}, got {q}"))),
            };
            (g, q, format!("daubechies-{q}"))
        }
        other => return Err(Error::config(format!("unknown wavelet family '{other}'"))),
    };
    let m = lowpass.len();
    let highpass = (0..m).map(|k| if k % 2 == 0 { lowpass[m - 1 - k] } else { -lowpass[m - 1 - k] }).collect();
    Ok(FilterPair { name, vanishing_moments: q, lowpass, highpass })
}

impl FilterPair {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn vanishing_moments(&self) -> usize {
        self.vanishing_moments
    }

    pub fn lowpass(&self) -> &[f64] {
        &self.lowpass
    }

    pub fn highpass(&self) -> &[f64] {
        &self.highpass
    }

    /// The `2^n - 1` high-pass kernels; in 2D each is an `M×M` tensor product
    /// flattened row-major with the axis-0 tap as the row index.
    pub fn highpass_banks(&self, dims: usize) -> Vec<Vec<f64>> {
        let outer =
            |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().flat_map(|x| b.iter().map(move |y| x * y)).collect() };
        match dims {
            1 => vec![self.highpass.clone()],
            _ => vec![
                outer(&self.lowpass, &self.highpass),
                outer(&self.highpass, &self.lowpass),
                outer(&self.highpass, &self.highpass),
            ],
        }
    }
}

/// Detail coefficients of one analysis step: `2^n - 1` channels of equal
/// side stored contiguously, channel by channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detail {
    side: usize,
    dims: usize,
    data: Vec<f64>,
}

pub fn channel_count(dims: usize) -> usize {
    (1 << dims) - 1
}

impl Detail {
    pub fn new(side: usize, dims: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        let want = channel_count(dims) * side.pow(dims as u32);
        if data.len() != want {
            return Err(Error::shape(format!(
                "detail of side {side} in {dims}D needs {want} values, got {}",
                data.len()
            )));
        }
        Ok(Detail { side, dims, data })
    }

    pub fn zeros(side: usize, dims: usize) -> Self {
        Detail { side, dims, data: vec![0.0; channel_count(dims) * side.pow(dims as u32)] }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn channels(&self) -> usize {
        channel_count(self.dims)
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.side.pow(self.dims as u32);
        &self.data[k * n..(k + 1) * n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

fn down(x: &[f64], stride: usize, n: usize, filt: &[f64], out: &mut [f64], out_stride: usize) {
    for k in 0..n / 2 {
        let mut acc = 0.0;
        for (m, c) in filt.iter().enumerate() {
            acc += c * x[((2 * k + m) % n) * stride];
        }
        out[k * out_stride] = acc;
    }
}

fn up_add(y: &[f64], stride: usize, n: usize, filt: &[f64], out: &mut [f64], out_stride: usize) {
    for k in 0..n / 2 {
        let v = y[k * stride];
        for (m, c) in filt.iter().enumerate() {
            out[((2 * k + m) % n) * out_stride] += c * v;
        }
    }
}

/// One analysis step on a raw buffer; returns (low, detail) buffers.
pub fn analyze_slice(x: &[f64], side: usize, dims: usize, f: &FilterPair) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dims(dims)?;
    if side == 0 || !side.is_multiple_of(2) {
        return Err(Error::shape(format!("analysis needs an even side, got {side}")));
    }
    if x.len() != side.pow(dims as u32) {
        return Err(Error::shape("buffer length does not match side"));
    }
    let (g, h) = (&f.lowpass[..], &f.highpass[..]);
    let half = side / 2;
    if dims == 1 {
        let mut low = vec![0.0; half];
        let mut det = vec![0.0; half];
        down(x, 1, side, g, &mut low, 1);
        down(x, 1, side, h, &mut det, 1);
        return Ok((low, det));
    }
    // Filter along axis 1 (within rows), then along axis 0 (down columns).
    let mut row_low = vec![0.0; side * half];
    let mut row_high = vec![0.0; side * half];
    for i in 0..side {
        let row = &x[i * side..(i + 1) * side];
        down(row, 1, side, g, &mut row_low[i * half..], 1);
        down(row, 1, side, h, &mut row_high[i * half..], 1);
    }
    let q = half * half;
    let mut low = vec![0.0; q];
    let mut det = vec![0.0; 3 * q];
    for j in 0..half {
        down(&row_low[j..], half, side, g, &mut low[j..], half);
        down(&row_high[j..], half, side, g, &mut det[j..], half);
        down(&row_low[j..], half, side, h, &mut det[q + j..], half);
        down(&row_high[j..], half, side, h, &mut det[2 * q + j..], half);
    }
    Ok((low, det))
}

/// Adjoint of [`analyze_slice`]: `G^T low + Ḡ^T detail`.
pub fn synthesize_slice(low: &[f64], det: &[f64], half: usize, dims: usize, f: &FilterPair) -> Result<Vec<f64>> {
    check_dims(dims)?;
    let q = half.pow(dims as u32);
    if low.len() != q || det.len() != channel_count(dims) * q {
        return Err(Error::shape("low/detail sizes are inconsistent"));
    }
    let (g, h) = (&f.lowpass[..], &f.highpass[..]);
    let side = 2 * half;
    let mut out = vec![0.0; side.pow(dims as u32)];
    if dims == 1 {
        up_add(low, 1, side, g, &mut out, 1);
        up_add(det, 1, side, h, &mut out, 1);
        return Ok(out);
    }
    let mut row_low = vec![0.0; side * half];
    let mut row_high = vec![0.0; side * half];
    for j in 0..half {
        up_add(&low[j..], half, side, g, &mut row_low[j..], half);
        up_add(&det[q + j..], half, side, h, &mut row_low[j..], half);
        up_add(&det[j..], half, side, g, &mut row_high[j..], half);
        up_add(&det[2 * q + j..], half, side, h, &mut row_high[j..], half);
    }
    for i in 0..side {
        let row = &mut out[i * side..(i + 1) * side];
        up_add(&row_low[i * half..], 1, side, g, row, 1);
        up_add(&row_high[i * half..], 1, side, h, row, 1);
    }
    Ok(out)
}

pub fn analyze_once(x: &Field, f: &FilterPair) -> Result<(Field, Detail)> {
    let (low, det) = analyze_slice(x.as_slice(), x.side(), x.dims(), f)?;
    let half = x.side() / 2;
    Ok((Field::new(half, x.dims(), low)?, Detail::new(half, x.dims(), det)?))
}

pub fn synthesize_once(low: &Field, detail: &Detail, f: &FilterPair) -> Result<Field> {
    if low.side() != detail.side() || low.dims() != detail.dims() {
        return Err(Error::shape("low and detail shapes differ"));
    }
    let out = synthesize_slice(low.as_slice(), detail.as_slice(), low.side(), low.dims(), f)?;
    Field::new(2 * low.side(), low.dims(), out)
}

/// Per-scale normalization factors γ_1..γ_J.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizerSet {
    pub gamma: Vec<f64>,
}

impl NormalizerSet {
    pub fn identity(scales: usize) -> Self {
        NormalizerSet { gamma: vec![1.0; scales] }
    }

    pub fn scales(&self) -> usize {
        self.gamma.len()
    }
}

/// Normalized multiscale decomposition `{x_J, x̄_J, ..., x̄_1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveletPyramid {
    pub coarse: Field,
    /// `details[j - 1]` holds x̄_j.
    pub details: Vec<Detail>,
    pub normalizers: NormalizerSet,
    pub base_side: usize,
    pub dims: usize,
}

impl WaveletPyramid {
    pub fn scales(&self) -> usize {
        self.details.len()
    }

    pub fn coefficient_count(&self) -> usize {
        self.coarse.len() + self.details.iter().map(Detail::len).sum::<usize>()
    }
}

/// Number of halvings available for a side before reaching an odd or unit side.
pub fn max_scales(side: usize) -> usize {
    if side == 0 {
        0
    } else {
        side.trailing_zeros() as usize
    }
}

fn check_scales(side: usize, scales: usize) -> Result<()> {
    if scales > max_scales(side) {
        return Err(Error::shape(format!("side {side} is not divisible by 2^{scales}")));
    }
    Ok(())
}

pub fn decompose(x: &Field, scales: usize, f: &FilterPair, norms: &NormalizerSet) -> Result<WaveletPyramid> {
    check_scales(x.side(), scales)?;
    if norms.scales() != scales {
        return Err(Error::config(format!("{} normalizers for {scales} scales", norms.scales())));
    }
    let mut cur = x.clone();
    let mut details = Vec::with_capacity(scales);
    for &g in &norms.gamma {
        let (low, det) = analyze_slice(cur.as_slice(), cur.side(), cur.dims(), f)?;
        let inv = 1.0 / g;
        let half = cur.side() / 2;
        details.push(Detail::new(half, x.dims(), det.into_iter().map(|v| v * inv).collect())?);
        cur = Field::new(half, x.dims(), low.into_iter().map(|v| v * inv).collect())?;
    }
    Ok(WaveletPyramid { coarse: cur, details, normalizers: norms.clone(), base_side: x.side(), dims: x.dims() })
}

/// One normalized reconstruction step `x_{j-1} = γ (G^T x_j + Ḡ^T x̄_j)`.
pub fn reconstruct_step(
    low: &[f64],
    det: &[f64],
    half: usize,
    dims: usize,
    gamma: f64,
    f: &FilterPair,
) -> Result<Vec<f64>> {
    let mut out = synthesize_slice(low, det, half, dims, f)?;
    out.iter_mut().for_each(|v| *v *= gamma);
    Ok(out)
}

pub fn reconstruct(p: &WaveletPyramid, f: &FilterPair) -> Result<Field> {
    if p.normalizers.scales() != p.details.len() {
        return Err(Error::shape("pyramid normalizers and details disagree"));
    }
    let mut cur = p.coarse.clone();
    for (det, &g) in p.details.iter().zip(&p.normalizers.gamma).rev() {
        if det.side() != cur.side() {
            return Err(Error::shape("pyramid detail side does not match the running coarse field"));
        }
        let out = reconstruct_step(cur.as_slice(), det.as_slice(), cur.side(), p.dims, g, f)?;
        cur = Field::new(2 * det.side(), p.dims, out)?;
    }
    if cur.side() != p.base_side {
        return Err(Error::shape("reconstructed side differs from the pyramid base side"));
    }
    Ok(cur)
}

/// Estimate γ_1..γ_J so that each normalized detail field has unit mean
/// energy per coefficient. Scales are processed in order, each on the
/// already-normalized coarse fields of the previous one.
pub fn estimate_normalizers(dataset: &[Field], scales: usize, f: &FilterPair) -> Result<NormalizerSet> {
    let (side, dims) = common_shape(dataset)?;
    check_scales(side, scales)?;
    let mut current: Vec<Vec<f64>> = dataset.iter().map(|x| x.as_slice().to_vec()).collect();
    let mut side_j = side;
    let mut gamma = Vec::with_capacity(scales);
    for j in 1..=scales {
        let split: Vec<(Vec<f64>, Vec<f64>)> =
            current.iter().map(|x| analyze_slice(x, side_j, dims, f)).collect::<Result<_>>()?;
        let count = (channel_count(dims) * (side_j / 2).pow(dims as u32)) as f64;
        let n = split.len() as f64;
        let detail_energy = split.iter().map(|(_, d)| d.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n / count;
        let field_energy = current.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
            / n
            / side_j.pow(dims as u32) as f64;
        if !(detail_energy > 1e-20 * field_energy) || detail_energy == 0.0 {
            return Err(Error::DegenerateData(format!("no detail energy at scale {j}")));
        }
        let g = detail_energy.sqrt();
        gamma.push(g);
        current = split.into_iter().map(|(low, _)| low.into_iter().map(|v| v / g).collect()).collect();
        side_j /= 2;
    }
    Ok(NormalizerSet { gamma })
}

fn dense_1d(filt: &[f64], side: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(side / 2, side);
    for k in 0..side / 2 {
        for (t, c) in filt.iter().enumerate() {
            m[(k, (2 * k + t) % side)] += c;
        }
    }
    m
}

/// Dense `G` and stacked `Ḡ` acting on row-major flattened fields; the rows
/// of `Ḡ` follow the channel-major detail layout.
pub fn operator_matrices(f: &FilterPair, side: usize, dims: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_dims(dims)?;
    if side == 0 || !side.is_multiple_of(2) {
        return Err(Error::shape(format!("operator matrices need an even side, got {side}")));
    }
    let d = side.pow(dims as u32);
    if d > DENSE_CAP {
        return Err(Error::resource(format!("dense operators of size {d} exceed the cap {DENSE_CAP}")));
    }
    let g = dense_1d(&f.lowpass, side);
    let h = dense_1d(&f.highpass, side);
    if dims == 1 {
        return Ok((g, h));
    }
    let blocks = [g.kronecker(&h), h.kronecker(&g), h.kronecker(&h)];
    let q = blocks[0].nrows();
    let mut hbar = DMatrix::zeros(3 * q, d);
    for (k, b) in blocks.iter().enumerate() {
        hbar.rows_mut(k * q, q).copy_from(b);
    }
    Ok((g.kronecker(&g), hbar))
}

/// Dense matrix of the full normalized analysis: rows ordered as
/// (x̄_1, x̄_2, ..., x̄_J, x_J), matching [`flatten_pyramid`].
pub fn full_transform_matrix(f: &FilterPair, side: usize, dims: usize, norms: &NormalizerSet) -> Result<DMatrix<f64>> {
    let d = side.pow(dims as u32);
    if d > DENSE_CAP {
        return Err(Error::resource(format!("dense transform of size {d} exceeds the cap {DENSE_CAP}")));
    }
    let mut w = DMatrix::zeros(d, d);
    let mut e = Field::zeros(side, dims);
    for u in 0..d {
        e.as_mut_slice().fill(0.0);
        e.as_mut_slice()[u] = 1.0;
        let p = decompose(&e, norms.scales(), f, norms)?;
        let col = flatten_pyramid(&p);
        w.column_mut(u).copy_from_slice(&col);
    }
    Ok(w)
}

/// Concatenate (x̄_1, ..., x̄_J, x_J).
pub fn flatten_pyramid(p: &WaveletPyramid) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.coefficient_count());
    for d in &p.details {
        out.extend_from_slice(d.as_slice());
    }
    out.extend_from_slice(p.coarse.as_slice());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn random_field(rng: &mut ChaCha8Rng, side: usize, dims: usize) -> Field {
        let n = side.pow(dims as u32);
        Field::new(side, dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn all_filters() -> Vec<FilterPair> {
        let mut v = vec![make_filters("haar", 1).unwrap()];
        for q in 2..=4 {
            v.push(make_filters("daubechies", q).unwrap());
        }
        v
    }

    #[test]
    fn haar_coefficients() {
        let f = make_filters("haar", 1).unwrap();
        assert_eq!(f.lowpass(), &[FRAC_1_SQRT_2, FRAC_1_SQRT_2]);
        assert_eq!(f.highpass(), &[FRAC_1_SQRT_2, -FRAC_1_SQRT_2]);
    }

    #[test]
    fn lowpass_sums_to_sqrt2() {
        for f in all_filters() {
            let s: f64 = f.lowpass().iter().sum();
            assert!((s - 2f64.sqrt()).abs() < 1e-12, "{}", f.name());
        }
    }

    #[test]
    fn daubechies_orthogonality_and_moments() {
        for q in 2..=4usize {
            let f = make_filters("daubechies", q).unwrap();
            let g = f.lowpass();
            for shift in 0..g.len() / 2 {
                let s: f64 = (0..g.len() - 2 * shift).map(|m| g[m] * g[m + 2 * shift]).sum();
                let want = if shift == 0 { 1.0 } else { 0.0 };
                assert!((s - want).abs() < 1e-15, "q={q} shift={shift}");
            }
            for k in 0..q {
                let s: f64 = f.highpass().iter().enumerate().map(|(m, c)| c * (m as f64).powi(k as i32)).sum();
                assert!(s.abs() < 1e-11, "q={q} moment {k} = {s}");
            }
        }
    }

    #[test]
    fn unsupported_filters_rejected() {
        assert!(matches!(make_filters("daubechies", 5), Err(Error::Config(_))));
        assert!(matches!(make_filters("symlet", 4), Err(Error::Config(_))));
    }

    #[test]
    fn haar_two_point_examples() {
        let f = make_filters("haar", 1).unwrap();
        let (low, det) = analyze_once(&Field::new(2, 1, vec![1.0, 1.0]).unwrap(), &f).unwrap();
        assert!((low.as_slice()[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!(det.as_slice()[0].abs() < 1e-15);
        let (low, det) = analyze_once(&Field::new(2, 1, vec![1.0, -1.0]).unwrap(), &f).unwrap();
        assert!(low.as_slice()[0].abs() < 1e-15);
        assert!((det.as_slice()[0] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn haar_dense_two_point() {
        let f = make_filters("haar", 1).unwrap();
        let (g, h) = operator_matrices(&f, 2, 1).unwrap();
        assert_eq!(g.shape(), (1, 2));
        assert!((g[(0, 0)] - FRAC_1_SQRT_2).abs() < 1e-15 && (g[(0, 1)] - FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((h[(0, 0)] - FRAC_1_SQRT_2).abs() < 1e-15 && (h[(0, 1)] + FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn odd_side_rejected() {
        let f = make_filters("haar", 1).unwrap();
        assert!(matches!(analyze_once(&Field::zeros(5, 1), &f), Err(Error::Shape(_))));
        let low = Field::zeros(2, 1);
        assert!(matches!(synthesize_once(&low, &Detail::zeros(3, 1), &f), Err(Error::Shape(_))));
    }

    #[test]
    fn stacked_operator_is_orthogonal() {
        for f in all_filters() {
            for (side, dims) in [(8, 1), (32, 1), (8, 2), (16, 2)] {
                let (g, h) = operator_matrices(&f, side, dims).unwrap();
                let mut w = DMatrix::zeros(g.nrows() + h.nrows(), g.ncols());
                w.rows_mut(0, g.nrows()).copy_from(&g);
                w.rows_mut(g.nrows(), h.nrows()).copy_from(&h);
                let err = (&w * w.transpose() - DMatrix::identity(w.nrows(), w.nrows())).amax();
                assert!(err < 1e-12, "{} side {side} dims {dims}: {err}", f.name());
            }
        }
    }

    #[test]
    fn dense_and_convolution_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for f in all_filters() {
            for (side, dims) in [(4, 1), (16, 1), (64, 1), (4, 2), (8, 2), (16, 2)] {
                let x = random_field(&mut rng, side, dims);
                let (g, h) = operator_matrices(&f, side, dims).unwrap();
                let xv = DVector::from_column_slice(x.as_slice());
                let (low, det) = analyze_once(&x, &f).unwrap();
                let dl = (&g * &xv - DVector::from_column_slice(low.as_slice())).amax();
                let dd = (&h * &xv - DVector::from_column_slice(det.as_slice())).amax();
                assert!(dl < 1e-12 && dd < 1e-12, "{} side {side} dims {dims}", f.name());
                let y = synthesize_once(&low, &det, &f).unwrap();
                let back = g.transpose() * DVector::from_column_slice(low.as_slice())
                    + h.transpose() * DVector::from_column_slice(det.as_slice());
                assert!((back - DVector::from_column_slice(y.as_slice())).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn unitarity_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for f in all_filters() {
            for (side, dims) in [(8, 1), (16, 1), (128, 1), (8, 2), (32, 2)] {
                for _ in 0..100 {
                    let x = random_field(&mut rng, side, dims);
                    let (low, det) = analyze_once(&x, &f).unwrap();
                    let y = synthesize_once(&low, &det, &f).unwrap();
                    let err = x.as_slice().iter().zip(y.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    assert!(err <= 1e-12 * x.norm_sq().sqrt());
                    // Cross terms: Ḡ G^T y = 0 and G Ḡ^T ȳ = 0.
                    let half = side / 2;
                    let only_low = synthesize_once(&low, &Detail::zeros(half, dims), &f).unwrap();
                    let (_, d2) = analyze_once(&only_low, &f).unwrap();
                    assert!(d2.norm_sq().sqrt() <= 1e-12 * low.norm_sq().sqrt());
                    let only_det = synthesize_once(&Field::zeros(half, dims), &det, &f).unwrap();
                    let (l2, _) = analyze_once(&only_det, &f).unwrap();
                    assert!(l2.norm_sq().sqrt() <= 1e-12 * det.norm_sq().sqrt().max(1e-300));
                }
            }
        }
    }

    #[test]
    fn low_projection_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = make_filters("daubechies", 4).unwrap();
        let x = random_field(&mut rng, 16, 2);
        let (low, _) = analyze_once(&x, &f).unwrap();
        let proj = synthesize_once(&low, &Detail::zeros(8, 2), &f).unwrap();
        let (low2, det2) = analyze_once(&proj, &f).unwrap();
        for (a, b) in low.as_slice().iter().zip(low2.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(det2.norm_sq() < 1e-24);
    }

    #[test]
    fn zero_synthesis_is_zero() {
        let f = make_filters("daubechies", 2).unwrap();
        let y = synthesize_once(&Field::zeros(4, 2), &Detail::zeros(4, 2), &f).unwrap();
        assert!(y.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn round_trip_all_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for f in [make_filters("haar", 1).unwrap(), make_filters("daubechies", 4).unwrap()] {
            for dims in 1..=2 {
                for side in [8usize, 16, 32, 64, 128] {
                    let x = random_field(&mut rng, side, dims);
                    for scales in [1, max_scales(side)] {
                        let norms = NormalizerSet { gamma: (0..scales).map(|j| 0.5 + 0.3 * j as f64).collect() };
                        let p = decompose(&x, scales, &f, &norms).unwrap();
                        assert_eq!(p.coefficient_count(), x.len());
                        let y = reconstruct(&p, &f).unwrap();
                        let err: f64 = x.as_slice().iter().zip(y.as_slice()).map(|(a, b)| (a - b).powi(2)).sum();
                        assert!(err.sqrt() <= 1e-10 * x.norm_sq().sqrt());
                    }
                }
            }
        }
    }

    #[test]
    fn too_many_scales_rejected() {
        let f = make_filters("haar", 1).unwrap();
        let x = Field::zeros(12, 1);
        assert!(matches!(decompose(&x, 3, &f, &NormalizerSet::identity(3)), Err(Error::Shape(_))));
    }

    #[test]
    fn white_noise_normalizers_are_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = rand_distr::StandardNormal;
        let data: Vec<Field> = (0..400)
            .map(|_| Field::new(32, 2, (0..1024).map(|_| rng.sample::<f64, _>(normal)).collect()).unwrap())
            .collect();
        let f = make_filters("daubechies", 4).unwrap();
        let norms = estimate_normalizers(&data, 3, &f).unwrap();
        for g in &norms.gamma {
            assert!((g - 1.0).abs() < 0.03, "{norms:?}");
        }
    }

    #[test]
    fn constant_field_is_degenerate() {
        let f = make_filters("daubechies", 4).unwrap();
        let data = vec![Field::constant(16, 2, 0.7)];
        assert!(matches!(estimate_normalizers(&data, 2, &f), Err(Error::DegenerateData(_))));
        assert!(matches!(estimate_normalizers(&[], 2, &f), Err(Error::Config(_))));
    }

    #[test]
    fn dense_cap_enforced() {
        let f = make_filters("haar", 1).unwrap();
        assert!(matches!(operator_matrices(&f, 128, 2), Err(Error::Resource(_))));
    }

    #[test]
    fn full_transform_is_orthogonal_up_to_scaling() {
        let f = make_filters("daubechies", 2).unwrap();
        let w = full_transform_matrix(&f, 16, 1, &NormalizerSet::identity(3)).unwrap();
        let err = (&w * w.transpose() - DMatrix::identity(16, 16)).amax();
        assert!(err < 1e-12);
    }

    proptest! {
        #[test]
        fn energy_is_conserved(seed in any::<u64>(), dims in 1usize..=2, k in 1usize..=5, which in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let side = 1 << k;
            let f = &all_filters()[which];
            let x = random_field(&mut rng, side, dims);
            let (low, det) = analyze_once(&x, f).unwrap();
            let e = low.norm_sq() + det.norm_sq();
            prop_assert!((e - x.norm_sq()).abs() <= 1e-10 * x.norm_sq());
        }

        #[test]
        fn decompose_reconstruct_identity(seed in any::<u64>(), dims in 1usize..=2, k in 1usize..=6, which in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let side = 1 << k;
            let f = &all_filters()[which];
            let x = random_field(&mut rng, side, dims);
            let scales = rng.gen_range(0..=k);
            let norms = NormalizerSet { gamma: (0..scales).map(|_| rng.gen_range(0.2..3.0)).collect() };
            let p = decompose(&x, scales, f, &norms).unwrap();
            let y = reconstruct(&p, f).unwrap();
            let err: f64 = x.as_slice().iter().zip(y.as_slice()).map(|(a, b)| (a - b).powi(2)).sum();
            prop_assert!(err.sqrt() <= 1e-10 * x.norm_sq().sqrt());
        }
    }
}
