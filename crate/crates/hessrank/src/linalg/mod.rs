//! Dense linear algebra kernel.
//!
//! [`Matrix`] is the universal carrier for weights, covariances and Hessians:
//! a dense row-major matrix over a [`Scalar`] element type. Kronecker products
//! and row-wise vectorization follow the conventions used throughout the
//! Hessian block assembly. SVD, eigendecomposition and rank measurement live
//! in [`decomp`].

use std::io::{Read, Write};
use std::ops::{Add, Index, IndexMut, Mul, Sub};
use std::path::Path;

use faer::{Accum, MatMut, MatRef};
use thiserror::Error;

use crate::scalar::{cast, Scalar};

mod decomp;

pub use decomp::{
    low_rank_error, measure_rank, singular_values, svd, sym_eig, sym_eig_with_vectors, RankMode,
    Spectrum, SvdResult,
};

/// Errors raised by the linear algebra kernel.
#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("entry count {got} does not match {rows}x{cols}")]
    EntryCount { rows: usize, cols: usize, got: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is {rows}x{cols}, expected square")]
    NonSquare { rows: usize, cols: usize },
    #[error("matrix asymmetry {max_abs:e} exceeds tolerance {tol:e}")]
    NotSymmetric { max_abs: f64, tol: f64 },
    #[error("rank cutoff {k} out of range 0..={max}")]
    CutoffOutOfRange { k: usize, max: usize },
    #[error("relative tolerance {rtol} outside (0, 1)")]
    InvalidRtol { rtol: f64 },
    #[error("SVD did not converge")]
    SvdNoConvergence,
    #[error("eigendecomposition did not converge")]
    EigNoConvergence,
    #[error("binary matrix io: {0}")]
    Io(#[from] std::io::Error),
    #[error("binary matrix file truncated or malformed")]
    MalformedBinary,
}

/// Dense row-major matrix.
///
/// Entries are validated to be finite on checked construction; all operations
/// preserve finiteness by construction (no divisions by zero inside kernels).
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    /// Builds a matrix from row-major entries, rejecting NaN/Inf.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::EntryCount { rows, cols, got: data.len() });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: if cols == 0 { 0 } else { pos / cols },
                col: if cols == 0 { 0 } else { pos % cols },
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix entry by entry; panics on a non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = f(i, j);
                assert!(v.is_finite(), "non-finite entry at ({i}, {j})");
                data.push(v);
            }
        }
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    /// Column vector from a slice.
    pub fn column(entries: &[T]) -> Self {
        Self::from_fn(entries.len(), 1, |i, _| entries[i])
    }

    pub fn diagonal(entries: &[T]) -> Self {
        let mut m = Self::zeros(entries.len(), entries.len());
        for (i, &v) in entries.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Matrix product through the faer gemm kernel.
    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = Self::zeros(self.rows, rhs.cols);
        faer::linalg::matmul::matmul(
            out.as_faer_mut(),
            Accum::Replace,
            self.as_faer(),
            rhs.as_faer(),
            T::one(),
            faer::get_global_parallelism(),
        );
        out
    }

    pub fn scale(&self, factor: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * factor).collect(),
        }
    }

    pub fn add_assign_scaled(&mut self, other: &Self, factor: T) {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b * factor;
        }
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape(), "diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// `‖self − other‖_F / ‖other‖_F`, or the absolute norm when `other` is zero.
    pub fn rel_frobenius_diff(&self, other: &Self) -> T {
        let denom = other.frobenius_norm();
        let num = (self - other).frobenius_norm();
        if denom == T::zero() {
            num
        } else {
            num / denom
        }
    }

    /// Largest `|a_ij − a_ji|` over the strict upper triangle.
    pub fn max_asymmetry(&self) -> T {
        assert!(self.is_square(), "asymmetry of a non-square matrix");
        let mut m = T::zero();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                m = m.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        m
    }

    /// `(A + Aᵀ)/2`.
    pub fn symmetrized(&self) -> Self {
        assert!(self.is_square(), "symmetrize a non-square matrix");
        let half = cast::<T>(0.5);
        Self::from_fn(self.rows, self.cols, |i, j| (self[(i, j)] + self[(j, i)]) * half)
    }

    pub fn block(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Self {
        assert!(row0 + rows <= self.rows && col0 + cols <= self.cols, "block out of range");
        Self::from_fn(rows, cols, |i, j| self[(row0 + i, col0 + j)])
    }

    pub fn set_block(&mut self, row0: usize, col0: usize, block: &Self) {
        assert!(
            row0 + block.rows <= self.rows && col0 + block.cols <= self.cols,
            "block out of range"
        );
        for i in 0..block.rows {
            for j in 0..block.cols {
                self[(row0 + i, col0 + j)] = block[(i, j)];
            }
        }
    }

    /// Sum of the columns, as `rows×1`.
    pub fn row_sums(&self) -> Self {
        Self::from_fn(self.rows, 1, |i, _| self.row(i).iter().copied().sum())
    }

    pub(crate) fn as_faer(&self) -> MatRef<'_, T> {
        MatRef::from_row_major_slice(&self.data, self.rows, self.cols)
    }

    pub(crate) fn as_faer_mut(&mut self) -> MatMut<'_, T> {
        MatMut::from_row_major_slice_mut(&mut self.data, self.rows, self.cols)
    }

    pub(crate) fn from_faer(m: MatRef<'_, T>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    /// Writes the little-endian binary dump: two u64 (rows, cols), then the
    /// entries row-major as 64-bit floats.
    pub fn write_binary(&self, path: &Path) -> Result<(), LinalgError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        for &v in &self.data {
            w.write_all(&v.to_f64().expect("finite").to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a matrix written by [`Matrix::write_binary`].
    pub fn read_binary(path: &Path) -> Result<Self, LinalgError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut header = [0u8; 8];
        r.read_exact(&mut header).map_err(|_| LinalgError::MalformedBinary)?;
        let rows = u64::from_le_bytes(header) as usize;
        r.read_exact(&mut header).map_err(|_| LinalgError::MalformedBinary)?;
        let cols = u64::from_le_bytes(header) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut buf).map_err(|_| LinalgError::MalformedBinary)?;
            data.push(cast::<T>(f64::from_le_bytes(buf)));
        }
        Self::from_vec(rows, cols, data)
    }
}

impl<T: Scalar> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T: Scalar> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl<T: Scalar> Mul for &Matrix<T> {
    type Output = Matrix<T>;

    fn mul(self, rhs: &Matrix<T>) -> Matrix<T> {
        self.matmul(rhs)
    }
}

impl<T: Scalar> Add for &Matrix<T> {
    type Output = Matrix<T>;

    fn add(self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect(),
        }
    }
}

impl<T: Scalar> Sub for &Matrix<T> {
    type Output = Matrix<T>;

    fn sub(self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.shape(), rhs.shape(), "sub shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect(),
        }
    }
}

impl<T: std::fmt::Debug> std::fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Matrix {}x{}", self.rows, self.cols)?;
        let show = self.rows.min(8);
        for i in 0..show {
            let cols = self.cols.min(8);
            let row: Vec<String> = (0..cols)
                .map(|j| format!("{:>12.6?}", self.data[i * self.cols + j]))
                .collect();
            writeln!(f, "  [{}{}]", row.join(", "), if self.cols > 8 { ", ..." } else { "" })?;
        }
        if self.rows > show {
            writeln!(f, "  ...")?;
        }
        Ok(())
    }
}

/// Kronecker product: block `(i, j)` of the result is `a[i,j] * b`.
pub fn kron<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = Matrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij == T::zero() {
                continue;
            }
            for p in 0..br {
                let dst = out.row_mut(i * br + p);
                let src = b.row(p);
                for q in 0..bc {
                    dst[j * bc + q] = aij * src[q];
                }
            }
        }
    }
    out
}

/// Row-wise vectorization: the rows of `a` concatenated into a column vector.
pub fn vec_row<T: Scalar>(a: &Matrix<T>) -> Matrix<T> {
    Matrix::from_fn(a.rows() * a.cols(), 1, |i, _| a[(i / a.cols(), i % a.cols())])
}
