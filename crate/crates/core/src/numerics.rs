//! Dense linear algebra, seeded randomness and the finite-difference oracle.
//!
//! Everything is `f64` and row-major. Reductions are plain left-to-right
//! loops so results are bitwise reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{DameError, Result};

/// Norms below this are treated as zero by [`l2_normalize`].
pub const ZERO_NORM: f64 = 1e-30;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DameError::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Matrix with i.i.d. `N(0, scale^2)` entries.
    pub fn randn(rows: usize, cols: usize, scale: f64, rng: &mut RngStream) -> Self {
        let data = (0..rows * cols).map(|_| scale * rng.gaussian()).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The leading `rows` rows as a borrowed block.
    pub fn leading_rows(&self, rows: usize) -> &[f64] {
        &self.data[..rows * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Column-wise mean over rows. Each column is summed in ascending order,
    /// so the result does not depend on row order.
    pub fn column_mean(&self) -> Vec<f64> {
        let mut col = vec![0.0; self.rows];
        let inv = 1.0 / self.rows as f64;
        (0..self.cols)
            .map(|c| {
                for (r, v) in col.iter_mut().enumerate() {
                    *v = self.data[r * self.cols + c];
                }
                col.sort_unstable_by(f64::total_cmp);
                col.iter().sum::<f64>() * inv
            })
            .collect()
    }

    /// Copy of rows `start..start + count`.
    pub fn slice_rows(&self, start: usize, count: usize) -> Matrix {
        Matrix {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n >= ZERO_NORM) {
        return Err(DameError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Outcome of a central-difference gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares `analytic` against central differences of `f` around `x`.
///
/// The per-coordinate error is `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(
    mut f: F,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if x.len() != analytic.len() {
        return Err(DameError::ShapeMismatch(format!(
            "{} coordinates but {} gradient entries",
            x.len(),
            analytic.len()
        )));
    }
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(DameError::ConfigInvalid(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut probe = x.to_vec();
    let mut worst = 0usize;
    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = f(&probe);
        probe[i] = x[i] - eps;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(DameError::NonFinite(format!("probe at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if rel > max_rel || rel.is_nan() {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(GradCheckReport {
        max_relative_error: max_rel,
        worst_coordinate: worst,
        tolerance,
        passed: max_rel < tolerance,
    })
}

/// Deterministic random stream: ChaCha8 keyed by `seed`, with an optional
/// 64-bit stream id for independent sub-streams.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngStream {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Fresh stream under the same seed, keyed by `id`. Does not depend on
    /// how much of `self` has been consumed.
    pub fn substream(&self, id: u64) -> RngStream {
        RngStream::with_stream(self.seed, mix_stream_id(self.stream, id))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn gaussian(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// `k` distinct indices from `0..n`, in sampling order.
    pub fn distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
    }
}

/// Creates the stream for `seed`.
pub fn seeded_rng(seed: u64) -> RngStream {
    RngStream::new(seed)
}

// splitmix64 finalizer over the parent stream and child id.
fn mix_stream_id(parent: u64, id: u64) -> u64 {
    let mut z = parent
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(id)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
