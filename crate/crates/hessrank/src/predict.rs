//! Closed-form rank formulas, bounds, and spectral predictions.
//!
//! Everything here is driven by an [`ArchitectureSummary`]: the input
//! covariance rank `r`, the hidden widths, the output dimension `K`, and the
//! residual covariance rank `s`. Two minimum dimensions coexist on purpose:
//! `q` (without `s`) governs the outer-product Hessian, while the functional
//! and total formulas consume the `s`-inclusive `q_s`. Every predicted number
//! carries an epistemic status so reports cannot overclaim.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Moments;
use crate::linalg::{kron, measure_rank, sym_eig, Matrix, RankMode};
use crate::model::{LossKind, NetworkSpec, Params};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("cross-entropy adjustment needs K >= 2, got K = {k}")]
    CrossEntropyOutputTooSmall { k: usize },
    #[error("functional spectrum prediction is stated for one hidden layer, got depth {depth}")]
    NotTwoLayer { depth: usize },
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
}

/// Epistemic status of a predicted rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exactness {
    /// Proved equality under the maximal-rank assumption.
    ProvedEquality,
    /// Proved upper bound.
    ProvedBound,
    /// Upper bound observed to hold with equality at initialization.
    TightEmpirical,
}

/// The numbers every formula consumes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSummary {
    /// Rank of the (uncentered) input covariance.
    pub r: usize,
    /// Hidden widths `M_1 … M_{L-1}`.
    pub hidden: Vec<usize>,
    /// Output dimension.
    pub k: usize,
    /// Depth `L` (number of weight layers).
    pub depth: usize,
    /// Rank of the residual-input covariance `Ω`.
    pub s: usize,
    /// Sum of hidden widths.
    pub m: usize,
    /// Parameter count (includes biases when the architecture has them).
    pub p: usize,
    /// `min(r, M_1, …, M_{L-1}, K)`.
    pub q: usize,
    /// `min(r, M_1, …, M_{L-1}, K, s)`.
    pub q_s: usize,
    /// `min(r+1, M_1, …, M_{L-1}, K)` (bias formulas).
    pub q_prime: usize,
    /// `min(r+1, K)` (bias formulas).
    pub s_prime: usize,
    /// Active hidden neurons, measured from activation caches (nonlinear).
    pub m_tilde: Option<usize>,
    pub use_bias: bool,
}

/// Collects the summary from an architecture and measured moments.
pub fn summarize<T: Scalar>(spec: &NetworkSpec, moments: &Moments<T>) -> ArchitectureSummary {
    summarize_counts(spec, moments.r, moments.s)
}

/// Summary from explicit `r` and `s` counts (no dataset required).
pub fn summarize_counts(spec: &NetworkSpec, r: usize, s: usize) -> ArchitectureSummary {
    let hidden = spec.hidden_widths().to_vec();
    let k = spec.output_dim();
    let q = hidden.iter().copied().chain([r, k]).min().expect("nonempty");
    let q_s = q.min(s);
    let q_prime = hidden.iter().copied().chain([r + 1, k]).min().expect("nonempty");
    ArchitectureSummary {
        r,
        m: hidden.iter().sum(),
        hidden,
        k,
        depth: spec.depth(),
        s,
        p: spec.param_count(),
        q,
        q_s,
        q_prime,
        s_prime: (r + 1).min(k),
        m_tilde: None,
        use_bias: spec.use_bias,
    }
}

/// Predicted ranks for one architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankPrediction {
    pub outer: usize,
    pub outer_status: Exactness,
    /// Per-layer column-block ranks of the functional Hessian.
    pub functional_columns: Vec<usize>,
    pub functional: Option<usize>,
    pub functional_status: Exactness,
    pub total: Option<usize>,
    pub total_status: Exactness,
    /// `p − total`: the count of flat directions.
    pub deficiency: Option<usize>,
}

/// Rank formulas for a deep linear network without bias.
///
/// - outer: `q (r + K − q)` — proved equality.
/// - column `l` of the functional Hessian: `q_s M_{l-1} + q_s M_l − q_s²`
///   inside, with `s` replacing the missing boundary width at both ends.
/// - functional: the column sum `2 q_s M + 2 q_s s − L q_s²` — tight
///   empirically at initialization.
/// - total: `2 q_s M − L q_s² + q_s (r + K)` — empirical equality.
///
/// A one-layer network has no hidden structure: everything collapses to
/// `rank = K·r` with a vanishing functional part.
pub fn predict_linear(arch: &ArchitectureSummary) -> RankPrediction {
    if arch.depth == 1 {
        let outer = arch.k * arch.r;
        return RankPrediction {
            outer,
            outer_status: Exactness::ProvedEquality,
            functional_columns: vec![0],
            functional: Some(0),
            functional_status: Exactness::ProvedEquality,
            total: Some(outer),
            total_status: Exactness::ProvedEquality,
            deficiency: Some(arch.p - outer),
        };
    }
    let q = arch.q;
    let qs = arch.q_s;
    let outer = q * (arch.r + arch.k - q);
    let mut columns = Vec::with_capacity(arch.depth);
    for l in 1..=arch.depth {
        let col = if l == 1 {
            qs * arch.hidden[0] + qs * arch.s - qs * qs
        } else if l == arch.depth {
            qs * arch.hidden[arch.depth - 2] + qs * arch.s - qs * qs
        } else {
            qs * arch.hidden[l - 2] + qs * arch.hidden[l - 1] - qs * qs
        };
        columns.push(col);
    }
    let functional = 2 * qs * arch.m + 2 * qs * arch.s - arch.depth * qs * qs;
    debug_assert_eq!(functional, columns.iter().sum::<usize>());
    let total = 2 * qs * arch.m - arch.depth * qs * qs + qs * (arch.r + arch.k);
    RankPrediction {
        outer,
        outer_status: Exactness::ProvedEquality,
        functional_columns: columns,
        functional: Some(functional),
        functional_status: Exactness::TightEmpirical,
        total: Some(total),
        total_status: Exactness::TightEmpirical,
        deficiency: Some(arch.p.saturating_sub(total)),
    }
}

/// Rank formulas for a deep linear network with bias:
///
/// - outer: `q (r + K − q) + K` — proved as a bound, observed as an equality.
/// - two layers: `H_f = 2 s' M_1`, `H_L = 2 s' (M_1 − q) + q (K + r + 1) + K`.
/// - deeper non-bottleneck nets (`M_i ≥ min(r+1, K)`):
///   `H_f = 2 q' M + 2 q' s' − L q'² + (L−2) q'` and
///   `H_L = 2 q' M + q' (r + K) − L q'² + L q'`.
/// - deeper bottleneck nets: only the outer bound is available.
pub fn predict_bias(arch: &ArchitectureSummary) -> RankPrediction {
    let q = arch.q;
    let outer = q * (arch.r + arch.k - q) + arch.k;
    let qp = arch.q_prime;
    let sp = arch.s_prime;
    let depth = arch.depth;
    let non_bottleneck = arch.hidden.iter().all(|&w| w >= (arch.r + 1).min(arch.k));
    let (functional, total) = if depth == 2 {
        let m1 = arch.hidden[0];
        (
            Some(2 * sp * m1),
            Some(2 * sp * (m1 - q) + q * (arch.k + arch.r + 1) + arch.k),
        )
    } else if non_bottleneck && depth >= 2 {
        (
            Some(2 * qp * arch.m + 2 * qp * sp - depth * qp * qp + (depth - 2) * qp),
            Some(2 * qp * arch.m + qp * (arch.r + arch.k) - depth * qp * qp + depth * qp),
        )
    } else {
        (None, None)
    };
    RankPrediction {
        outer,
        outer_status: Exactness::ProvedBound,
        functional_columns: Vec::new(),
        functional,
        functional_status: Exactness::TightEmpirical,
        total,
        total_status: Exactness::TightEmpirical,
        deficiency: total.map(|t| arch.p.saturating_sub(t)),
    }
}

/// Degeneracy bounds for rectified networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReluBounds {
    /// `r M̃ + M̃ K − M̃`; proved for one hidden layer (and for the loss
    /// Hessian at a minimum). `None` when the depth does not match or the
    /// active-neuron count is unknown.
    pub one_hidden: Option<usize>,
    /// `p − M_1 (d − r) − Σ M_i`; empirical generalization to any depth,
    /// assuming no dead neurons.
    pub deep: usize,
}

/// Upper bounds on the outer-product Hessian rank of a rectified network.
/// `d` is the raw input dimension (before any rank reduction).
pub fn predict_relu(arch: &ArchitectureSummary, d: usize) -> ReluBounds {
    let one_hidden = match (arch.depth, arch.m_tilde) {
        (2, Some(m_tilde)) => Some(arch.r * m_tilde + m_tilde * arch.k - m_tilde),
        _ => None,
    };
    let deep = arch.p - arch.hidden[0] * (d - arch.r) - arch.m;
    ReluBounds { one_hidden, deep }
}

/// Loss-driven adjustment of the linear formulas: under cross-entropy the
/// softmax removes one output degree of freedom, so every `K` becomes `K−1`
/// (with `q` and `s` re-derived). MSE and log-cosh pass through unchanged.
pub fn adjust_for_loss(
    arch: &ArchitectureSummary,
    loss: LossKind,
) -> Result<ArchitectureSummary, PredictError> {
    match loss {
        LossKind::Mse | LossKind::LogCosh => Ok(arch.clone()),
        LossKind::CrossEntropy => {
            if arch.k < 2 {
                return Err(PredictError::CrossEntropyOutputTooSmall { k: arch.k });
            }
            let k = arch.k - 1;
            let s = arch.s.min(k);
            let q = arch.hidden.iter().copied().chain([arch.r, k]).min().expect("nonempty");
            let q_prime = arch.hidden.iter().copied().chain([arch.r + 1, k]).min().expect("nonempty");
            Ok(ArchitectureSummary {
                k,
                s,
                q,
                q_s: q.min(s),
                q_prime,
                s_prime: (arch.r + 1).min(k),
                ..arch.clone()
            })
        }
    }
}

/// Assembles the stacked structure `Z = [I_q ⊗ C ; D ⊗ I_n]`.
pub fn assemble_z<T: Scalar>(c: &Matrix<T>, d: &Matrix<T>, q: usize, n: usize) -> Matrix<T> {
    assert_eq!(c.cols(), n, "C must have n columns");
    assert_eq!(d.cols(), q, "D must have q columns");
    let top = kron(&Matrix::identity(q), c);
    let bottom = kron(d, &Matrix::identity(n));
    let mut z = Matrix::zeros(top.rows() + bottom.rows(), q * n);
    z.set_block(0, 0, &top);
    z.set_block(top.rows(), 0, &bottom);
    z
}

/// Closed-form rank of the `Z` structure:
/// `q·rank(C) + n·rank(D) − rank(C)·rank(D)`.
pub fn z_rank<T: Scalar>(c: &Matrix<T>, d: &Matrix<T>, q: usize, n: usize) -> Result<usize, PredictError> {
    let rank_c = measure_rank(c, RankMode::Exact)?;
    let rank_d = measure_rank(d, RankMode::Exact)?;
    Ok(q * rank_c + n * rank_d - rank_c * rank_d)
}

/// Spectrum prediction for the outer-product Hessian of a linear network.
#[derive(Debug, Clone)]
pub struct OuterSpectrumPrediction<T> {
    /// Eigenvalues of the `Kr × Kr` surrogate, descending; its nonzero part
    /// equals the nonzero spectrum of the full `p × p` outer Hessian.
    pub eigenvalues: Vec<T>,
    /// When `K > M_{L-1}`: the repeated plateau values (nonzero eigenvalues
    /// of `W^{1:L-1} W^{L-1:1} Σ_xx`), each with multiplicity at least
    /// `K − M_{L-1}`. Empty otherwise.
    pub plateau_values: Vec<T>,
    /// `max(K − M_{L-1}, 0)`.
    pub plateau_multiplicity: usize,
}

/// Predicts the nonzero eigenvalues of `H_o` from the `Kd × Kd` surrogate
/// `Σ_l W^{L:l+1} W^{l+1:L} ⊗ W^{1:l-1} W^{l-1:1} Σ_xx` (same nonzero
/// spectrum as `H_o`), plus the plateau structure when the output layer is
/// wider than the last hidden layer.
pub fn predict_outer_spectrum<T: Scalar>(
    spec: &NetworkSpec,
    params: &Params<T>,
    moments: &Moments<T>,
) -> Result<OuterSpectrumPrediction<T>, PredictError> {
    let depth = spec.depth();
    let k_out = spec.output_dim();
    let d = spec.input_dim();
    // symmetric square root of Σ_xx
    let (sig_spec, sig_q) = crate::linalg::sym_eig_with_vectors(&moments.sigma_xx, "sigma_xx")?;
    let sqrt_vals: Vec<T> = sig_spec.eigenvalues.iter().map(|&v| v.max(T::zero()).sqrt()).collect();
    let sig_half = sig_q
        .matmul(&Matrix::diagonal(&sqrt_vals))
        .matmul(&sig_q.transpose());

    let mut inner = Matrix::zeros(k_out * d, k_out * d);
    let mut last_fwd_gram = Matrix::identity(d);
    for l in 1..=depth {
        let back = crate::model::chain_desc_or_identity(params, depth, l + 1, k_out);
        let fwd = crate::model::chain_desc_or_identity(params, l - 1, 1, d);
        let left = back.matmul(&back.transpose());
        let right = fwd.transpose().matmul(&fwd);
        if l == depth {
            last_fwd_gram = right.clone();
        }
        inner.add_assign_scaled(&kron(&left, &right), T::one());
    }
    let id_k = Matrix::identity(k_out);
    let half = kron(&id_k, &sig_half);
    let sym = half.matmul(&inner).matmul(&half);
    let eigenvalues = sym_eig(&sym, "outer-spectrum surrogate")?.eigenvalues;

    let last_hidden = spec.widths[depth - 1];
    let (plateau_values, plateau_multiplicity) = if k_out > last_hidden && depth >= 2 {
        let plateau_sym = sig_half.matmul(&last_fwd_gram).matmul(&sig_half);
        let vals = sym_eig(&plateau_sym, "plateau values")?.eigenvalues;
        let rank = measure_rank(&plateau_sym, RankMode::Exact)?;
        (vals.into_iter().take(rank).collect(), k_out - last_hidden)
    } else {
        (Vec::new(), 0)
    };
    Ok(OuterSpectrumPrediction { eigenvalues, plateau_values, plateau_multiplicity })
}

/// Predicted eigenvalue multiset of the functional Hessian of a one-hidden
/// layer linear network: `±σ_i(Ω)`, each with multiplicity `M_1`, padded with
/// zeros to the parameter count. Sorted descending.
pub fn predict_functional_spectrum<T: Scalar>(
    spec: &NetworkSpec,
    moments: &Moments<T>,
) -> Result<Vec<T>, PredictError> {
    if spec.depth() != 2 {
        return Err(PredictError::NotTwoLayer { depth: spec.depth() });
    }
    let m1 = spec.widths[1];
    let p = spec.param_count();
    let sv = crate::linalg::singular_values(&moments.omega)?;
    let tau = crate::scalar::cast_usize::<T>(moments.omega.rows().max(moments.omega.cols()))
        * T::epsilon()
        * sv.first().copied().unwrap_or_else(T::zero);
    let mut out = Vec::with_capacity(p);
    for &sigma in sv.iter().filter(|&&v| v > tau) {
        out.extend(std::iter::repeat_n(sigma, m1));
    }
    let negatives: Vec<T> = out.iter().rev().map(|&v| -v).collect();
    out.resize(p - negatives.len(), T::zero());
    out.extend(negatives);
    Ok(out)
}

#[cfg(test)]
mod tests;
