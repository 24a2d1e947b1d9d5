//! SVD, symmetric eigendecomposition, rank measurement and low-rank
//! reconstruction error.
//!
//! Rank is always measured from singular values: in exact mode the threshold
//! is `max(rows, cols) * eps * sigma_max` (the standard SVD rank convention),
//! in numerical mode it is `rtol * sigma_max`.

use faer::Side;

use super::{LinalgError, Matrix};
use crate::scalar::{cast, cast_usize, Scalar};

/// Absolute asymmetry accepted by [`sym_eig`] before symmetrization.
pub(crate) const SYM_TOL: f64 = 1e-10;

/// Thin singular value decomposition.
#[derive(Clone)]
pub struct SvdResult<T> {
    /// Nonincreasing, nonnegative.
    pub singular_values: Vec<T>,
    /// `rows × min(rows, cols)`, orthonormal columns.
    pub left_vectors: Matrix<T>,
    /// `cols × min(rows, cols)`, orthonormal columns.
    pub right_vectors: Matrix<T>,
}

/// Eigenvalues of a symmetric matrix, sorted descending, with a tag naming
/// the matrix they came from.
#[derive(Debug, Clone)]
pub struct Spectrum<T> {
    pub eigenvalues: Vec<T>,
    pub source: String,
}

/// Rank measurement mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankMode {
    /// Threshold `max(rows, cols) * machine_eps * sigma_max`.
    Exact,
    /// Threshold `rtol * sigma_max`, `0 < rtol < 1`.
    Numerical { rtol: f64 },
}

/// Full (thin) SVD with vectors.
pub fn svd<T: Scalar>(a: &Matrix<T>) -> Result<SvdResult<T>, LinalgError> {
    let s = a.as_faer().thin_svd().map_err(|_| LinalgError::SvdNoConvergence)?;
    let k = a.rows().min(a.cols());
    let sv = s.S().column_vector();
    Ok(SvdResult {
        singular_values: (0..k).map(|i| sv[i]).collect(),
        left_vectors: Matrix::from_faer(s.U()),
        right_vectors: Matrix::from_faer(s.V()),
    })
}

/// Singular values only (cheaper than [`svd`] for rank queries).
pub fn singular_values<T: Scalar>(a: &Matrix<T>) -> Result<Vec<T>, LinalgError> {
    if a.rows() == 0 || a.cols() == 0 {
        return Ok(Vec::new());
    }
    a.as_faer().singular_values().map_err(|_| LinalgError::SvdNoConvergence)
}

fn rank_from_singular_values<T: Scalar>(sv: &[T], shape: (usize, usize), mode: RankMode) -> Result<usize, LinalgError> {
    let sigma_max = sv.first().copied().unwrap_or_else(T::zero);
    let tau = match mode {
        RankMode::Exact => cast_usize::<T>(shape.0.max(shape.1)) * T::epsilon() * sigma_max,
        RankMode::Numerical { rtol } => {
            if !(0.0 < rtol && rtol < 1.0) {
                return Err(LinalgError::InvalidRtol { rtol });
            }
            cast::<T>(rtol) * sigma_max
        }
    };
    Ok(sv.iter().filter(|&&s| s > tau).count())
}

/// Counts singular values above the mode's threshold. The zero matrix has
/// rank 0 in both modes.
pub fn measure_rank<T: Scalar>(a: &Matrix<T>, mode: RankMode) -> Result<usize, LinalgError> {
    let sv = singular_values(a)?;
    rank_from_singular_values(&sv, a.shape(), mode)
}

/// Eigenvalues of a symmetric matrix, descending. The input is symmetrized as
/// `(A + Aᵀ)/2` first; asymmetry beyond [`SYM_TOL`] is rejected.
pub fn sym_eig<T: Scalar>(a: &Matrix<T>, source: &str) -> Result<Spectrum<T>, LinalgError> {
    let sym = checked_symmetrize(a)?;
    let mut eigenvalues = sym
        .as_faer()
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|_| LinalgError::EigNoConvergence)?;
    eigenvalues.reverse();
    Ok(Spectrum { eigenvalues, source: source.to_string() })
}

/// Like [`sym_eig`] but also returns the orthonormal eigenvector matrix `Q`
/// with columns matching the descending eigenvalue order.
pub fn sym_eig_with_vectors<T: Scalar>(
    a: &Matrix<T>,
    source: &str,
) -> Result<(Spectrum<T>, Matrix<T>), LinalgError> {
    let sym = checked_symmetrize(a)?;
    let e = sym
        .as_faer()
        .self_adjoint_eigen(Side::Lower)
        .map_err(|_| LinalgError::EigNoConvergence)?;
    let n = a.rows();
    let vals = e.S().column_vector();
    let eigenvalues: Vec<T> = (0..n).map(|i| vals[n - 1 - i]).collect();
    let u = e.U();
    let q = Matrix::from_fn(n, n, |i, j| u[(i, n - 1 - j)]);
    Ok((Spectrum { eigenvalues, source: source.to_string() }, q))
}

fn checked_symmetrize<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NonSquare { rows: a.rows(), cols: a.cols() });
    }
    let asym = a.max_asymmetry().to_f64().expect("finite");
    if asym > SYM_TOL {
        return Err(LinalgError::NotSymmetric { max_abs: asym, tol: SYM_TOL });
    }
    Ok(a.symmetrized())
}

/// Relative Frobenius reconstruction error of the best rank-`k` approximation:
/// `‖A − A_k‖_F / ‖A‖_F`, which equals the tail of the singular values.
pub fn low_rank_error<T: Scalar>(a: &Matrix<T>, k: usize) -> Result<T, LinalgError> {
    let max = a.rows().min(a.cols());
    if k > max {
        return Err(LinalgError::CutoffOutOfRange { k, max });
    }
    let sv = singular_values(a)?;
    let total: T = sv.iter().map(|&s| s * s).sum();
    if total == T::zero() {
        return Ok(T::zero());
    }
    let tail: T = sv[k..].iter().map(|&s| s * s).sum();
    Ok((tail / total).sqrt())
}
