use std::fmt;

use crate::error::{Error, Result};
use crate::ndmath::Rng;

/// Dense row-major `f64` matrix.
///
/// All reductions run in a fixed loop order so repeated evaluation is
/// bit-identical. Vectors (biases, single contexts) are `1 x n` matrices or
/// plain slices.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list()
                .entries(self.data.chunks(self.cols.max(1)))
                .finish()?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims("Matrix::new", (rows, cols), (data.len(), 1)));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Single-row matrix holding `v`.
    pub fn row_vector(v: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dims("Matrix::from_rows", (i, r.len()), (0, cols)));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.uniform(-scale, scale)).collect();
        Matrix { rows, cols, data }
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
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

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        self.data.iter_mut().for_each(|x| *x = f(*x));
    }

    fn check_same(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dims(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "add")?;
        let mut out = self.clone();
        out.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "sub")?;
        let mut out = self.clone();
        out.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a -= b);
        Ok(out)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "hadamard")?;
        let mut out = self.clone();
        out.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a *= b);
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    pub fn scale_inplace(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same(other, "axpy")?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += alpha * b);
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.axpy(1.0, other)
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row_broadcast(&mut self, bias: &Matrix) -> Result<()> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::dims("add_row_broadcast", self.shape(), bias.shape()));
        }
        for r in 0..self.rows {
            self.row_mut(r)
                .iter_mut()
                .zip(&bias.data)
                .for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    /// Column sums as a `1 x cols` matrix.
    pub fn col_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            out.data
                .iter_mut()
                .zip(self.row(r))
                .for_each(|(a, b)| *a += b);
        }
        out
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn gather_cols(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, indices.len());
        for r in 0..self.rows {
            let src = self.row(r);
            for (dst, &c) in out.row_mut(r).iter_mut().zip(indices) {
                *dst = src[c];
            }
        }
        out
    }

    /// `self[indices[i], :] += rows[i, :]`.
    pub fn scatter_add_rows(&mut self, indices: &[usize], rows: &Matrix) {
        debug_assert_eq!(indices.len(), rows.rows);
        for (src, &dst) in indices.iter().enumerate() {
            self.row_mut(dst)
                .iter_mut()
                .zip(rows.row(src))
                .for_each(|(a, b)| *a += b);
        }
    }

    /// `self[:, indices[j]] += cols[:, j]`.
    pub fn scatter_add_cols(&mut self, indices: &[usize], cols: &Matrix) {
        debug_assert_eq!(indices.len(), cols.cols);
        for r in 0..self.rows {
            let src = cols.row(r);
            let dst = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (&c, v) in indices.iter().zip(src) {
                dst[c] += v;
            }
        }
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Horizontal concatenation `[a | b]`.
    pub fn hcat(a: &Matrix, b: &Matrix) -> Result<Matrix> {
        if a.rows != b.rows {
            return Err(Error::dims("hcat", a.shape(), b.shape()));
        }
        let mut out = Matrix::zeros(a.rows, a.cols + b.cols);
        for r in 0..a.rows {
            let row = out.row_mut(r);
            row[..a.cols].copy_from_slice(a.row(r));
            row[a.cols..].copy_from_slice(b.row(r));
        }
        Ok(out)
    }

    /// Splits columns at `at`, the inverse of [`Matrix::hcat`].
    pub fn hsplit(&self, at: usize) -> (Matrix, Matrix) {
        let mut left = Matrix::zeros(self.rows, at);
        let mut right = Matrix::zeros(self.rows, self.cols - at);
        for r in 0..self.rows {
            let row = self.row(r);
            left.row_mut(r).copy_from_slice(&row[..at]);
            right.row_mut(r).copy_from_slice(&row[at..]);
        }
        (left, right)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Eight fixed lanes, then a fixed pairwise fold: deterministic and vectorizable.
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let x = &a[i * 8..i * 8 + 8];
        let y = &b[i * 8..i * 8 + 8];
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `c (+)= a * b` over strided views; all shapes checked by the callers.
#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the views address `m*k`, `k*n` and `m*n` elements inside slices
    // whose lengths the callers verified against the same shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out (+)= a * b`.
pub fn matmul_into(out: &mut Matrix, a: &Matrix, b: &Matrix, accumulate: bool) -> Result<()> {
    if a.cols != b.rows || out.shape() != (a.rows, b.cols) {
        return Err(Error::dims("matmul", a.shape(), b.shape()));
    }
    let dims = (a.rows, a.cols, b.cols);
    gemm(dims, &a.data, (a.cols, 1), &b.data, (b.cols, 1), &mut out.data, accumulate);
    Ok(())
}

/// `out (+)= a^T * b`.
pub fn matmul_tn_into(out: &mut Matrix, a: &Matrix, b: &Matrix, accumulate: bool) -> Result<()> {
    if a.rows != b.rows || out.shape() != (a.cols, b.cols) {
        return Err(Error::dims("matmul_tn", a.shape(), b.shape()));
    }
    let dims = (a.cols, a.rows, b.cols);
    gemm(dims, &a.data, (1, a.cols), &b.data, (b.cols, 1), &mut out.data, accumulate);
    Ok(())
}

/// `out (+)= a * b^T`.
pub fn matmul_nt_into(out: &mut Matrix, a: &Matrix, b: &Matrix, accumulate: bool) -> Result<()> {
    if a.cols != b.cols || out.shape() != (a.rows, b.rows) {
        return Err(Error::dims("matmul_nt", a.shape(), b.shape()));
    }
    let dims = (a.rows, a.cols, b.rows);
    gemm(dims, &a.data, (a.cols, 1), &b.data, (1, b.cols), &mut out.data, accumulate);
    Ok(())
}

/// Standard product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::dims("matmul", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    matmul_into(&mut out, a, b, false)?;
    Ok(out)
}

/// `a^T * b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::dims("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    matmul_tn_into(&mut out, a, b, false)?;
    Ok(out)
}

/// `a * b^T` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::dims("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    matmul_nt_into(&mut out, a, b, false)?;
    Ok(out)
}

/// Matrix-vector product `a * x`.
pub fn matvec(a: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if a.cols != x.len() {
        return Err(Error::dims("matvec", a.shape(), (x.len(), 1)));
    }
    Ok((0..a.rows).map(|r| dot(a.row(r), x)).collect())
}

pub fn tanh_map(x: &Matrix) -> Matrix {
    x.map(f64::tanh)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-stabilized softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Argument("softmax of an empty vector".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("softmax input contains non-finite values".into()));
    }
    let mut out = logits.to_vec();
    softmax_inplace(&mut out);
    Ok(out)
}

/// In-place softmax; entries equal to `-inf` (masked) receive probability 0.
pub fn softmax_inplace(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `ln(sum(exp(v)))`, stabilized.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
