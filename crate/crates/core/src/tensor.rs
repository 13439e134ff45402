//! Dense row-major matrices and the handful of kernels the trainer needs.
//!
//! Every reduction runs in a fixed order. In particular each product entry
//! is accumulated over the shared dimension in increasing index order,
//! starting from zero, exactly like a naive triple loop; the blocked kernel
//! only changes which entries are in flight at once, never the order of the
//! additions into one entry. Results therefore do not depend on batch
//! size, tiling edges or which worker runs the product.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

/// Norms below this are treated as zero by [`Matrix::row_normalize`].
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<R> {
    rows: usize,
    cols: usize,
    data: Vec<R>,
}

impl<R: Real> Matrix<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![R::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<R>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for {rows}x{cols}", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows<T: AsRef<[R]>>(rows: &[T]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Converts every entry through `f64`; used to move between precisions.
    pub fn cast<S: Real>(&self) -> Matrix<S> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| S::from_f64(v.as_f64())).collect(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[R] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<R> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> R {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: R) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[R] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [R] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[R]> + '_ {
        // chunks_exact(0) panics, and a 0-column matrix has no row data anyway
        let step = self.cols.max(1);
        self.data.chunks_exact(step).take(if self.cols == 0 { 0 } else { self.rows })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Gathers the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stacks `self` on top of `below`.
    pub fn vstack(&self, below: &Self) -> Result<Self> {
        if self.cols != below.cols {
            return Err(Error::shape(
                "vstack",
                format!("{} columns", self.cols),
                format!("{} columns", below.cols),
            ));
        }
        let mut data = Vec::with_capacity(self.data.len() + below.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&below.data);
        Ok(Matrix {
            rows: self.rows + below.rows,
            cols: self.cols,
            data,
        })
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hstack(parts: &[&Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::shape(
                "hstack",
                format!("{rows} rows"),
                format!("{} rows", bad.rows),
            ));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::shape(
                "matmul",
                format!("lhs cols == rhs rows ({})", self.cols),
                format!("{}x{} · {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        gemm(self.rows, self.cols, rhs.cols, &self.data, &rhs.data, &mut out.data);
        Ok(out)
    }

    /// `selfᵀ · rhs`, summing over rows in increasing order.
    pub fn matmul_tn(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(Error::shape(
                "matmul_tn",
                format!("equal row counts ({})", self.rows),
                format!("{} rows", rhs.rows),
            ));
        }
        self.transpose().matmul(rhs)
    }

    /// `self · rhsᵀ`.
    pub fn matmul_nt(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(Error::shape(
                "matmul_nt",
                format!("equal column counts ({})", self.cols),
                format!("{} columns", rhs.cols),
            ));
        }
        self.matmul(&rhs.transpose())
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[R]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::shape(
                "add_row_vector",
                format!("{} entries", self.cols),
                format!("{} entries", bias.len()),
            ));
        }
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v = *v + b;
            }
        }
        Ok(())
    }

    /// Column sums, accumulated over rows in increasing order.
    pub fn column_sums(&self) -> Vec<R> {
        let mut out = vec![R::zero(); self.cols];
        for row in self.row_iter() {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        out
    }

    pub fn relu(&self) -> Self {
        let mut out = self.clone();
        out.relu_in_place();
        out
    }

    pub fn relu_in_place(&mut self) {
        for v in &mut self.data {
            if !(*v > R::zero()) {
                *v = R::zero();
            }
        }
    }

    /// Scales each row to unit L2 norm; rows with norm below
    /// [`NORM_FLOOR`] are left untouched.
    pub fn row_normalize(&self) -> Self {
        let mut out = self.clone();
        out.row_normalize_in_place();
        out
    }

    pub fn row_normalize_in_place(&mut self) {
        let floor = R::from_f64(NORM_FLOOR);
        let cols = self.cols.max(1);
        for row in self.data.chunks_exact_mut(cols) {
            let norm = sum_squares(row).sqrt();
            if norm >= floor {
                for v in row.iter_mut() {
                    *v = *v / norm;
                }
            }
        }
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Self {
        let mut out = self.clone();
        let cols = self.cols.max(1);
        for row in out.data.chunks_exact_mut(cols) {
            let max = row.iter().copied().fold(R::neg_infinity(), R::max);
            let mut total = R::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        out
    }

    /// Row-wise log-softmax, `x - max - ln Σ exp(x - max)`.
    pub fn log_softmax_rows(&self) -> Self {
        let mut out = self.clone();
        let cols = self.cols.max(1);
        for row in out.data.chunks_exact_mut(cols) {
            let max = row.iter().copied().fold(R::neg_infinity(), R::max);
            let mut total = R::zero();
            for v in row.iter() {
                total = total + (*v - max).exp();
            }
            let shift = max + total.ln();
            for v in row.iter_mut() {
                *v = *v - shift;
            }
        }
        out
    }

    /// Per-row sum of squares.
    pub fn row_sum_squares(&self) -> Vec<R> {
        self.row_iter().map(sum_squares).collect()
    }

    /// Per-row argmax; ties go to the lowest column.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.row_iter().map(argmax).collect()
    }
}

#[inline]
pub(crate) fn sum_squares<R: Real>(row: &[R]) -> R {
    row.iter().fold(R::zero(), |acc, &v| acc + v * v)
}

/// Index of the largest value; the lowest index wins ties. NaN never wins.
pub fn argmax<R: Real>(values: &[R]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Depth of one packed block of the shared dimension.
const KC: usize = 256;
/// Below this many multiply-adds the plain row loop is faster.
const SMALL: usize = 1 << 15;

/// `c = a · b` for row-major `a` (m×k), `b` (k×n), `c` (m×n), with `c`
/// zero on entry. Each `c[i][j]` is accumulated as `((0 + a0·b0) + a1·b1)
/// + …` in increasing k, the same as the naive loop, whatever the tiling.
fn gemm<R: Real>(m: usize, k: usize, n: usize, a: &[R], b: &[R], c: &mut [R]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    if m * k * n < SMALL {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
                for (x, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *x = *x + av * bv;
                }
            }
        }
        return;
    }
    // one 64-byte vector register per micro-tile row chunk, 24 accumulators
    if R::BYTES == 4 {
        tiled::<R, 6, 64>(m, k, n, a, b, c);
    } else {
        tiled::<R, 6, 32>(m, k, n, a, b, c);
    }
}

fn tiled<R: Real, const MR: usize, const NR: usize>(m: usize, k: usize, n: usize, a: &[R], b: &[R], c: &mut [R]) {
    let mut bp = vec![R::zero(); KC * NR];
    let mut ap = vec![R::zero(); KC * MR];
    let mut k0 = 0;
    while k0 < k {
        let kc = KC.min(k - k0);
        let mut j0 = 0;
        while j0 < n {
            let w = NR.min(n - j0);
            for p in 0..kc {
                let src = (k0 + p) * n + j0;
                let dst = &mut bp[p * NR..(p + 1) * NR];
                dst[..w].copy_from_slice(&b[src..src + w]);
                dst[w..].iter_mut().for_each(|v| *v = R::zero());
            }
            let mut i0 = 0;
            while i0 < m {
                let h = MR.min(m - i0);
                for p in 0..kc {
                    for r in 0..MR {
                        ap[p * MR + r] = if r < h { a[(i0 + r) * k + k0 + p] } else { R::zero() };
                    }
                }
                let mut acc = [[R::zero(); NR]; MR];
                for r in 0..h {
                    let at = (i0 + r) * n + j0;
                    acc[r][..w].copy_from_slice(&c[at..at + w]);
                }
                for p in 0..kc {
                    let bv: &[R; NR] = bp[p * NR..(p + 1) * NR].try_into().unwrap();
                    let av: &[R; MR] = ap[p * MR..(p + 1) * MR].try_into().unwrap();
                    for r in 0..MR {
                        for j in 0..NR {
                            acc[r][j] = acc[r][j] + av[r] * bv[j];
                        }
                    }
                }
                for r in 0..h {
                    let at = (i0 + r) * n + j0;
                    c[at..at + w].copy_from_slice(&acc[r][..w]);
                }
                i0 += MR;
            }
            j0 += NR;
        }
        k0 += kc;
    }
}

/// Uniform weights in `±1/√in_dim` and a zero bias, reproducible per seed.
pub fn init_layer<R: Real>(in_dim: usize, out_dim: usize, rng_seed: u64) -> (Matrix<R>, Vec<R>) {
    use rand::Rng;
    assert!(in_dim >= 1 && out_dim >= 1, "layer dimensions must be positive");
    let mut rng = crate::rng::stream(rng_seed, crate::rng::Purpose::Init, 0, 0);
    let bound = 1.0 / num_traits::Float::sqrt(in_dim as f64);
    let data = (0..in_dim * out_dim)
        .map(|_| R::from_f64(rng.random_range(-bound..=bound)))
        .collect();
    (
        Matrix {
            rows: in_dim,
            cols: out_dim,
            data,
        },
        vec![R::zero(); out_dim],
    )
}
