//! Exact Hessian computation.
//!
//! Three independent routes are implemented:
//!
//! - [`assemble_linear`]: the analytic Kronecker-block form for identity
//!   activation, with and without bias. Off-diagonal functional blocks are
//!   first built against the transposed weight variable (where the chain
//!   structure is clean) and then permuted back into the standard row-wise
//!   vectorization layout.
//! - [`gauss_newton`]: the outer-product term `E[Jᵀ (∂²ℓ) J]` from stacked
//!   per-sample Jacobians, valid for any activation and loss.
//! - [`full_hessian`]: exact forward-over-reverse tangent propagation through
//!   the gradient, one parameter coordinate per column. The propagation keeps
//!   the Gauss-Newton and the residual-contracted streams separate, so the
//!   split `H = H_o + H_f` is exact by construction (no numerical
//!   differencing anywhere).
//!
//! The flat parameter order everywhere is `vec_row(W^1) … vec_row(W^L)`, then
//! `b^1 … b^L`.

use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{Dataset, Moments};
use crate::linalg::{kron, measure_rank, sym_eig_with_vectors, vec_row, Matrix, RankMode};
use crate::model::{
    chain_desc_or_identity, forward, gradient_from_cache, loss_from_outputs, ForwardCache,
    NetworkSpec, Params,
};
use crate::scalar::{cast, cast_usize, Scalar};

/// Default guard on the parameter count for dense `p × p` computations.
pub const DEFAULT_PARAM_CAP: usize = 6000;
/// Default guard on `N·K` for the NTK Gram matrix.
pub const DEFAULT_NTK_CAP: usize = 4000;

#[derive(Debug, Error)]
pub enum HessianError {
    #[error("analytic assembly requires identity activation; use full_hessian")]
    NonlinearArchitecture,
    #[error("{what} size {size} exceeds cap {cap}")]
    CapExceeded { what: &'static str, size: usize, cap: usize },
    #[error("moments dimension {got} does not match network input {expected}")]
    MomentsDim { got: usize, expected: usize },
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

/// Offsets of the layerwise blocks inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockIndex {
    widths: Vec<usize>,
    weight_ranges: Vec<Range<usize>>,
    bias_ranges: Option<Vec<Range<usize>>>,
    total: usize,
}

impl BlockIndex {
    pub fn new(spec: &NetworkSpec) -> Self {
        let mut offset = 0;
        let mut weight_ranges = Vec::with_capacity(spec.depth());
        for l in 1..spec.widths.len() {
            let len = spec.widths[l] * spec.widths[l - 1];
            weight_ranges.push(offset..offset + len);
            offset += len;
        }
        let bias_ranges = spec.use_bias.then(|| {
            (1..spec.widths.len())
                .map(|l| {
                    let r = offset..offset + spec.widths[l];
                    offset += spec.widths[l];
                    r
                })
                .collect()
        });
        Self { widths: spec.widths.clone(), weight_ranges, bias_ranges, total: offset }
    }

    /// Flat range of `vec_row(W^l)`, `l` 1-based.
    pub fn weight_range(&self, l: usize) -> Range<usize> {
        self.weight_ranges[l - 1].clone()
    }

    /// Flat range of `b^l`, `l` 1-based.
    pub fn bias_range(&self, l: usize) -> Option<Range<usize>> {
        self.bias_ranges.as_ref().map(|r| r[l - 1].clone())
    }

    pub fn param_count(&self) -> usize {
        self.total
    }

    pub fn depth(&self) -> usize {
        self.weight_ranges.len()
    }
}

/// The assembled Hessian and its two parts. `h_total = h_outer +
/// h_functional` holds exactly (elementwise sum at construction).
#[derive(Debug, Clone)]
pub struct HessianParts<T> {
    pub h_outer: Matrix<T>,
    pub h_functional: Matrix<T>,
    pub h_total: Matrix<T>,
    pub block_index: BlockIndex,
}

impl<T: Scalar> HessianParts<T> {
    fn from_parts(h_outer: Matrix<T>, h_functional: Matrix<T>, block_index: BlockIndex) -> Self {
        let h_total = &h_outer + &h_functional;
        Self { h_outer, h_functional, h_total, block_index }
    }

    /// The `p × (M_l · M_{l-1})` column block of the functional Hessian for
    /// layer `l` (1-based). Rank-equivalent to the transposed-variable block
    /// column, since column permutations do not change rank.
    pub fn functional_column_block(&self, l: usize) -> Matrix<T> {
        let range = self.block_index.weight_range(l);
        self.h_functional
            .block(0, range.start, self.h_functional.rows(), range.len())
    }

    /// Writes the three matrices as binary dumps `<stem>_{total,outer,functional}.bin`.
    pub fn dump_binary(&self, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>, HessianError> {
        let mut written = Vec::new();
        for (name, m) in [
            ("total", &self.h_total),
            ("outer", &self.h_outer),
            ("functional", &self.h_functional),
        ] {
            let path = dir.join(format!("{stem}_{name}.bin"));
            m.write_binary(&path)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// The outer-product factorization `H_o = A_o B_o A_oᵀ`. Without bias `B_o =
/// I_K ⊗ Σ_xx`; with bias the input gains a homogeneous coordinate and `B_o =
/// I_K ⊗ [[Σ_xx, μ], [μᵀ, 1]]`.
#[derive(Debug, Clone)]
pub struct OuterFactorization<T> {
    pub a_o: Matrix<T>,
    pub b_o: Matrix<T>,
}

/// Bias offsets `c^l = F^{l:1}(0)` of a linear network: `c^0 = 0`,
/// `c^l = W^l c^{l-1} + b^l`.
fn bias_offsets<T: Scalar>(spec: &NetworkSpec, params: &Params<T>) -> Vec<Matrix<T>> {
    let mut offsets = Vec::with_capacity(spec.depth() + 1);
    offsets.push(Matrix::zeros(spec.input_dim(), 1));
    for l in 0..spec.depth() {
        let mut c = params.weights[l].matmul(&offsets[l]);
        if let Some(bs) = &params.biases {
            c = &c + &bs[l];
        }
        offsets.push(c);
    }
    offsets
}

/// Remaps a block from derivatives against `vec_row(W^lᵀ)` to derivatives
/// against `vec_row(W^l)`: output column `i·cols_w + j` is input column
/// `j·rows_w + i` for `W^l : rows_w × cols_w`.
fn permute_from_transposed<T: Scalar>(block: &Matrix<T>, rows_w: usize, cols_w: usize) -> Matrix<T> {
    assert_eq!(block.cols(), rows_w * cols_w);
    Matrix::from_fn(block.rows(), block.cols(), |r, c| {
        let (i, j) = (c / cols_w, c % cols_w);
        block[(r, j * rows_w + i)]
    })
}

/// Mirrors the strict upper triangle onto the lower one, making the matrix
/// exactly symmetric.
fn mirror_upper<T: Scalar>(m: &mut Matrix<T>) {
    for i in 1..m.rows() {
        for j in 0..i {
            m[(i, j)] = m[(j, i)];
        }
    }
}

/// Analytic Kronecker-block Hessian of a deep linear network at the given
/// moments. Exact for arbitrary (also uncentered) data; the bias terms enter
/// through the offsets `F^{l:1}(0)` and the first moments.
pub fn assemble_linear<T: Scalar>(
    spec: &NetworkSpec,
    params: &Params<T>,
    moments: &Moments<T>,
) -> Result<(HessianParts<T>, OuterFactorization<T>), HessianError> {
    if !spec.is_linear() {
        return Err(HessianError::NonlinearArchitecture);
    }
    params.validate(spec)?;
    let d = spec.input_dim();
    if moments.sigma_xx.rows() != d {
        return Err(HessianError::MomentsDim { got: moments.sigma_xx.rows(), expected: d });
    }
    let depth = spec.depth();
    let k_out = spec.output_dim();
    let index = BlockIndex::new(spec);
    let p = index.param_count();

    // Backward factors B_l = W^{L:l+1} (K × M_l) and forward factors
    // F_l = W^{l-1:1} (M_{l-1} × d), including the empty-chain identities.
    let back: Vec<Matrix<T>> = (1..=depth)
        .map(|l| chain_desc_or_identity(params, depth, l + 1, k_out))
        .collect();
    let fwd: Vec<Matrix<T>> = (1..=depth)
        .map(|l| chain_desc_or_identity(params, l - 1, 1, d))
        .collect();
    let offsets = bias_offsets(spec, params);
    // E[F^{l-1:1}(x)] = F_l μ + c^{l-1}
    let fwd_means: Vec<Matrix<T>> = (1..=depth)
        .map(|l| &fwd[l - 1].matmul(&moments.mean_x) + &offsets[l - 1])
        .collect();

    let mut h_outer = Matrix::zeros(p, p);
    for k in 1..=depth {
        let range_k = index.weight_range(k);
        for l in k..=depth {
            let left = back[k - 1].transpose().matmul(&back[l - 1]);
            // E[F^{k-1:1}(x) F^{1:l-1}(x)]
            let mut right = fwd[k - 1].matmul(&moments.sigma_xx).matmul(&fwd[l - 1].transpose());
            if spec.use_bias {
                let fk_mu = fwd[k - 1].matmul(&moments.mean_x);
                let fl_mu = fwd[l - 1].matmul(&moments.mean_x);
                right = &right + &fk_mu.matmul(&offsets[l - 1].transpose());
                right = &right + &offsets[k - 1].matmul(&fl_mu.transpose());
                right = &right + &offsets[k - 1].matmul(&offsets[l - 1].transpose());
            }
            h_outer.set_block(range_k.start, index.weight_range(l).start, &kron(&left, &right));
        }
        if spec.use_bias {
            for l in 1..=depth {
                // weight-bias block (W^k, b^l): (B_kᵀ B_l) ⊗ E[F^{k-1:1}(x)];
                // weight rows always precede bias columns in the flat order
                let left = back[k - 1].transpose().matmul(&back[l - 1]);
                let block = kron(&left, &fwd_means[k - 1]);
                let bias_l = index.bias_range(l).expect("bias");
                h_outer.set_block(range_k.start, bias_l.start, &block);
            }
            let bias_k = index.bias_range(k).expect("bias");
            for l in k..=depth {
                let block = back[k - 1].transpose().matmul(&back[l - 1]);
                h_outer.set_block(bias_k.start, index.bias_range(l).expect("bias").start, &block);
            }
        }
    }
    mirror_upper(&mut h_outer);

    // Functional blocks, built in the transposed-variable form and permuted
    // back. Only k < l is assembled; the lower triangle is the mirror.
    let mut h_functional = Matrix::zeros(p, p);
    for k in 1..=depth {
        for l in (k + 1)..=depth {
            // W^{k+1:l-1} ⊗ [E(F^{k-1:1}(x) δᵀ) W^{L:l+1}]
            let left = chain_desc_or_identity(params, l - 1, k + 1, spec.widths[k]).transpose();
            let mut data_part = fwd[k - 1].matmul(&moments.omega.transpose());
            if spec.use_bias {
                data_part = &data_part + &offsets[k - 1].matmul(&moments.mean_residual.transpose());
            }
            let right = data_part.matmul(&back[l - 1]);
            let transposed_block = kron(&left, &right);
            let block = permute_from_transposed(&transposed_block, spec.widths[l], spec.widths[l - 1]);
            h_functional.set_block(index.weight_range(k).start, index.weight_range(l).start, &block);
        }
        if spec.use_bias {
            // (b^k, W^l) blocks for l > k are W^{k+1:l-1} ⊗ E[δᵀ] W^{L:l+1};
            // stored transposed at (W^l, b^k) to stay in the upper triangle
            for l in (k + 1)..=depth {
                let left = chain_desc_or_identity(params, l - 1, k + 1, spec.widths[k]).transpose();
                let right = moments.mean_residual.transpose().matmul(&back[l - 1]);
                let block = permute_from_transposed(&kron(&left, &right), spec.widths[l], spec.widths[l - 1]);
                let bias_k = index.bias_range(k).expect("bias");
                h_functional.set_block(index.weight_range(l).start, bias_k.start, &block.transpose());
            }
            // (W^k, b^l) blocks for l < k: (W^{k+1:L} E[δ]) ⊗ W^{k-1:l+1}
            for l in 1..k {
                let left = back[k - 1].transpose().matmul(&moments.mean_residual);
                let right = chain_desc_or_identity(params, k - 1, l + 1, spec.widths[l]);
                let block = kron(&left, &right);
                let bias_l = index.bias_range(l).expect("bias");
                h_functional.set_block(index.weight_range(k).start, bias_l.start, &block);
            }
        }
    }
    mirror_upper(&mut h_functional);

    // Outer factorization over the (possibly homogeneous) input coordinates.
    let aug = if spec.use_bias { d + 1 } else { d };
    let mut a_o = Matrix::zeros(p, k_out * aug);
    for l in 1..=depth {
        let factor = if spec.use_bias {
            let mut f = Matrix::zeros(spec.widths[l - 1], aug);
            f.set_block(0, 0, &fwd[l - 1]);
            f.set_block(0, d, &offsets[l - 1]);
            f
        } else {
            fwd[l - 1].clone()
        };
        let block = kron(&back[l - 1].transpose(), &factor);
        a_o.set_block(index.weight_range(l).start, 0, &block);
        if spec.use_bias {
            let mut unit = Matrix::zeros(1, aug);
            unit[(0, d)] = T::one();
            let block = kron(&back[l - 1].transpose(), &unit);
            a_o.set_block(index.bias_range(l).expect("bias").start, 0, &block);
        }
    }
    let b_core = if spec.use_bias {
        let mut s = Matrix::zeros(aug, aug);
        s.set_block(0, 0, &moments.sigma_xx);
        s.set_block(0, d, &moments.mean_x);
        s.set_block(d, 0, &moments.mean_x.transpose());
        s[(d, d)] = T::one();
        s
    } else {
        moments.sigma_xx.clone()
    };
    let b_o = kron(&Matrix::identity(k_out), &b_core);

    Ok((
        HessianParts::from_parts(h_outer, h_functional, index),
        OuterFactorization { a_o, b_o },
    ))
}

/// Per-sample network Jacobians `∂ŷ_i/∂θ`, stacked into an `NK × p` matrix.
/// Row block `i` is the `K × p` Jacobian of sample `i`.
pub fn stacked_jacobian<T: Scalar>(
    spec: &NetworkSpec,
    params: &Params<T>,
    cache: &ForwardCache<T>,
) -> Matrix<T> {
    let depth = spec.depth();
    let k_out = spec.output_dim();
    let n = cache.batch_size();
    let index = BlockIndex::new(spec);
    let p = index.param_count();
    let mut j_all = Matrix::zeros(n * k_out, p);
    for i in 0..n {
        // backward maps B_l = ∂ŷ/∂z^l for this sample, from the output down
        let mut back = Matrix::identity(k_out);
        for l in (1..=depth).rev() {
            let a_prev = &cache.activations[l - 1];
            let range = index.weight_range(l);
            // ∂ŷ/∂W^l = B_l ⊗ a^{l-1}ᵀ, written row-wise into the block
            for r in 0..k_out {
                for c in 0..spec.widths[l] {
                    let factor = back[(r, c)];
                    if factor == T::zero() {
                        continue;
                    }
                    let row = j_all.row_mut(i * k_out + r);
                    for m in 0..spec.widths[l - 1] {
                        row[range.start + c * spec.widths[l - 1] + m] += factor * a_prev[(m, i)];
                    }
                }
            }
            if let Some(bias_range) = index.bias_range(l) {
                for r in 0..k_out {
                    let row = j_all.row_mut(i * k_out + r);
                    for c in 0..spec.widths[l] {
                        row[bias_range.start + c] = back[(r, c)];
                    }
                }
            }
            if l > 1 {
                // B_{l-1} = B_l W^l diag(σ'(z^{l-1}))
                let mut next = back.matmul(&params.weights[l - 1]);
                let prime = &cache.act_prime[l - 2];
                for r in 0..next.rows() {
                    for c in 0..next.cols() {
                        next[(r, c)] = next[(r, c)] * prime[(c, i)];
                    }
                }
                back = next;
            }
        }
    }
    j_all
}

/// Outer-product (Gauss-Newton) Hessian `(1/N) Σ_i J_iᵀ (∂²ℓ_i) J_i` for any
/// activation and loss. Positive semidefinite by construction.
pub fn gauss_newton<T: Scalar>(
    spec: &NetworkSpec,
    params: &Params<T>,
    dataset: &Dataset<T>,
) -> Result<Matrix<T>, HessianError> {
    let cache = forward(spec, params, &dataset.inputs)?;
    let eval = loss_from_outputs(spec, cache.outputs(), &dataset.targets)?;
    let j_all = stacked_jacobian(spec, params, &cache);
    let k_out = spec.output_dim();
    let n = dataset.num_samples();
    // scale row block i by S_iᵀ where ∂²ℓ_i = S_i S_iᵀ
    let scaled = match spec.loss {
        crate::model::LossKind::Mse => j_all,
        _ => {
            let mut scaled = Matrix::zeros(j_all.rows(), j_all.cols());
            for i in 0..n {
                let h = &eval.loss_output_hessians[i];
                let (s_spec, q) = sym_eig_with_vectors(h, "loss-output")?;
                // S_iᵀ = diag(sqrt(λ)_+) Qᵀ
                let mut st = q.transpose();
                for r in 0..k_out {
                    let f = s_spec.eigenvalues[r].max(T::zero()).sqrt();
                    for c in 0..k_out {
                        st[(r, c)] = st[(r, c)] * f;
                    }
                }
                let block = j_all.block(i * k_out, 0, k_out, j_all.cols());
                scaled.set_block(i * k_out, 0, &st.matmul(&block));
            }
            scaled
        }
    };
    let mut gn = scaled.transpose().matmul(&scaled).scale(T::one() / cast_usize::<T>(n));
    mirror_upper(&mut gn);
    Ok(gn)
}

/// Empirical NTK Gram matrix: the `NK × NK` matrix of pairwise Jacobian inner
/// products `∇F(x_i) ∇F(x_j)ᵀ`.
pub fn ntk_gram<T: Scalar>(
    spec: &NetworkSpec,
    params: &Params<T>,
    dataset: &Dataset<T>,
    cap: Option<usize>,
) -> Result<Matrix<T>, HessianError> {
    let nk = dataset.num_samples() * spec.output_dim();
    let cap = cap.unwrap_or(DEFAULT_NTK_CAP);
    if nk > cap {
        return Err(HessianError::CapExceeded { what: "NTK Gram side N*K", size: nk, cap });
    }
    let cache = forward(spec, params, &dataset.inputs)?;
    let j_all = stacked_jacobian(spec, params, &cache);
    let mut gram = j_all.matmul(&j_all.transpose());
    mirror_upper(&mut gram);
    Ok(gram)
}

/// Exact full Hessian by tangent propagation through the gradient: column `j`
/// is the directional derivative of the analytic gradient along parameter
/// coordinate `j`. The Gauss-Newton and functional contributions are
/// propagated as separate tangent streams, so `h_functional` of a linear
/// network has exactly zero diagonal blocks and `h_total = h_outer +
/// h_functional` holds exactly.
pub fn full_hessian<T: Scalar>(
    spec: &NetworkSpec,
    params: &Params<T>,
    dataset: &Dataset<T>,
    cap: Option<usize>,
) -> Result<HessianParts<T>, HessianError> {
    let index = BlockIndex::new(spec);
    let p = index.param_count();
    let cap = cap.unwrap_or(DEFAULT_PARAM_CAP);
    if p > cap {
        return Err(HessianError::CapExceeded { what: "parameter count p", size: p, cap });
    }
    let cache = forward(spec, params, &dataset.inputs)?;
    let eval = loss_from_outputs(spec, cache.outputs(), &dataset.targets)?;
    // backward errors e^l for the base gradient (shared by every column)
    let errors = backward_errors(spec, params, &cache, &eval.residuals);

    let columns: Vec<(Vec<T>, Vec<T>)> = (0..p)
        .into_par_iter()
        .map(|j| hessian_column(spec, params, &index, &cache, &eval, &errors, j))
        .collect();

    let mut h_outer = Matrix::zeros(p, p);
    let mut h_functional = Matrix::zeros(p, p);
    for (j, (col_a, col_b)) in columns.iter().enumerate() {
        for i in 0..p {
            h_outer[(i, j)] = col_a[i];
            h_functional[(i, j)] = col_b[i];
        }
    }
    Ok(HessianParts::from_parts(h_outer, h_functional, index))
}

/// Backward error signals `e^L = ∂ℓ/∂ŷ`, `e^{l-1} = (W^lᵀ e^l) ⊙ σ'(z^{l-1})`,
/// indexed `[l-1] → e^l`.
fn backward_errors<T: Scalar>(
    spec: &NetworkSpec,
    params: &Params<T>,
    cache: &ForwardCache<T>,
    residuals: &Matrix<T>,
) -> Vec<Matrix<T>> {
    let depth = spec.depth();
    let mut errors = vec![Matrix::zeros(0, 0); depth];
    errors[depth - 1] = residuals.clone();
    for l in (1..depth).rev() {
        let back = params.weights[l].transpose().matmul(&errors[l]);
        let prime = &cache.act_prime[l - 1];
        errors[l - 1] = Matrix::from_fn(back.rows(), back.cols(), |i, j| back[(i, j)] * prime[(i, j)]);
    }
    errors
}

/// One Hessian column: the gradient tangent along parameter coordinate
/// `param_idx`, split into the Gauss-Newton stream (seeded by the loss
/// curvature) and the functional stream (the product-rule remainder).
#[allow(clippy::too_many_arguments)]
fn hessian_column<T: Scalar>(
    spec: &NetworkSpec,
    params: &Params<T>,
    index: &BlockIndex,
    cache: &ForwardCache<T>,
    eval: &crate::model::LossEval<T>,
    errors: &[Matrix<T>],
    param_idx: usize,
) -> (Vec<T>, Vec<T>) {
    let depth = spec.depth();
    let n = cache.batch_size();
    let k_out = spec.output_dim();
    let inv_n = T::one() / cast_usize::<T>(n);

    // locate the perturbed coordinate
    let mut seed_layer = 0; // 1-based
    let mut seed_row = 0;
    let mut seed_col = 0;
    let mut seed_is_bias = false;
    for l in 1..=depth {
        let range = index.weight_range(l);
        if range.contains(&param_idx) {
            let local = param_idx - range.start;
            seed_layer = l;
            seed_row = local / spec.widths[l - 1];
            seed_col = local % spec.widths[l - 1];
            break;
        }
        if let Some(range) = index.bias_range(l) {
            if range.contains(&param_idx) {
                seed_layer = l;
                seed_row = param_idx - range.start;
                seed_is_bias = true;
                break;
            }
        }
    }
    debug_assert!(seed_layer > 0);

    // forward tangent: ż^l and ȧ^l, zero below the seeded layer
    let mut z_dot: Vec<Option<Matrix<T>>> = vec![None; depth];
    let mut a_dot: Vec<Option<Matrix<T>>> = vec![None; depth + 1];
    {
        let mut zd = Matrix::zeros(spec.widths[seed_layer], n);
        if seed_is_bias {
            for j in 0..n {
                zd[(seed_row, j)] = T::one();
            }
        } else {
            let a_prev = &cache.activations[seed_layer - 1];
            for j in 0..n {
                zd[(seed_row, j)] = a_prev[(seed_col, j)];
            }
        }
        z_dot[seed_layer - 1] = Some(zd);
    }
    for l in seed_layer..=depth {
        let zd = if l == seed_layer {
            z_dot[l - 1].clone().expect("seeded")
        } else {
            let ad = a_dot[l - 1].as_ref().expect("propagated");
            let zd = params.weights[l - 1].matmul(ad);
            z_dot[l - 1] = Some(zd.clone());
            zd
        };
        if l < depth {
            let prime = &cache.act_prime[l - 1];
            a_dot[l] = Some(Matrix::from_fn(zd.rows(), zd.cols(), |i, j| prime[(i, j)] * zd[(i, j)]));
        } else {
            a_dot[l] = Some(zd);
        }
    }
    let y_dot = a_dot[depth].as_ref().expect("output tangent");

    // residual tangent ġ = (∂²ℓ) ŷ̇, per sample
    let mut g_dot = Matrix::zeros(k_out, n);
    match spec.loss {
        crate::model::LossKind::Mse => g_dot = y_dot.clone(),
        _ => {
            for j in 0..n {
                let h = &eval.loss_output_hessians[j];
                for r in 0..k_out {
                    let mut acc = T::zero();
                    for c in 0..k_out {
                        acc += h[(r, c)] * y_dot[(c, j)];
                    }
                    g_dot[(r, j)] = acc;
                }
            }
        }
    }

    // backward tangents, stream A (Gauss-Newton) and stream B (functional)
    let mut col_a = vec![T::zero(); index.param_count()];
    let mut col_b = vec![T::zero(); index.param_count()];
    let mut e_dot_a = g_dot;
    let mut e_dot_b = Matrix::zeros(k_out, n);
    for l in (1..=depth).rev() {
        let a_prev = &cache.activations[l - 1];
        // stream A: ėA^l a^{l-1}ᵀ
        let ga = e_dot_a.matmul(&a_prev.transpose()).scale(inv_n);
        write_block(&mut col_a, &index.weight_range(l), &ga);
        // stream B: ėB^l a^{l-1}ᵀ + e^l ȧ^{l-1}ᵀ
        let mut gb = e_dot_b.matmul(&a_prev.transpose());
        if l > seed_layer {
            if let Some(ad) = a_dot[l - 1].as_ref() {
                gb = &gb + &errors[l - 1].matmul(&ad.transpose());
            }
        }
        write_block(&mut col_b, &index.weight_range(l), &gb.scale(inv_n));
        if let Some(range) = index.bias_range(l) {
            let ba = e_dot_a.row_sums().scale(inv_n);
            let bb = e_dot_b.row_sums().scale(inv_n);
            for (i, idx) in range.clone().enumerate() {
                col_a[idx] = ba[(i, 0)];
                col_b[idx] = bb[(i, 0)];
            }
        }
        if l > 1 {
            let prime = &cache.act_prime[l - 2];
            let back_a = params.weights[l - 1].transpose().matmul(&e_dot_a);
            e_dot_a = Matrix::from_fn(back_a.rows(), back_a.cols(), |i, j| back_a[(i, j)] * prime[(i, j)]);
            // ėB^{l-1} = (W^lᵀ ėB^l) ⊙ σ' + (Ẇ^lᵀ e^l) ⊙ σ' + (W^lᵀ e^l) ⊙ σ'' ⊙ ż^{l-1}
            let mut back_b = params.weights[l - 1].transpose().matmul(&e_dot_b);
            if l == seed_layer && !seed_is_bias {
                let e_l = &errors[l - 1];
                for j in 0..n {
                    back_b[(seed_col, j)] += e_l[(seed_row, j)];
                }
            }
            let mut next_b = Matrix::from_fn(back_b.rows(), back_b.cols(), |i, j| back_b[(i, j)] * prime[(i, j)]);
            if l - 1 >= seed_layer {
                if let Some(zd) = z_dot[l - 2].as_ref() {
                    let second = &cache.act_second[l - 2];
                    let back_e = params.weights[l - 1].transpose().matmul(&errors[l - 1]);
                    for j in 0..n {
                        for i in 0..next_b.rows() {
                            next_b[(i, j)] += back_e[(i, j)] * second[(i, j)] * zd[(i, j)];
                        }
                    }
                }
            }
            e_dot_b = next_b;
        }
    }
    (col_a, col_b)
}

fn write_block<T: Scalar>(col: &mut [T], range: &Range<usize>, grad: &Matrix<T>) {
    let flat = vec_row(grad);
    col[range.start..range.end].copy_from_slice(flat.as_slice());
}

/// Central-difference Hessian of the loss, used only as a cross-check oracle
/// in tests and experiments (never in the exact pipeline).
pub fn finite_difference_hessian<T: Scalar>(
    spec: &NetworkSpec,
    params: &Params<T>,
    dataset: &Dataset<T>,
    step: f64,
) -> Result<Matrix<T>, HessianError> {
    let p = spec.param_count();
    let flat = params.flatten();
    let h = cast::<T>(step);
    let mut out = Matrix::zeros(p, p);
    for j in 0..p {
        let mut plus = flat.clone();
        plus[j] += h;
        let mut minus = flat.clone();
        minus[j] -= h;
        let gp = crate::model::gradient(spec, &Params::from_flat(spec, &plus)?, dataset)?;
        let gm = crate::model::gradient(spec, &Params::from_flat(spec, &minus)?, dataset)?;
        for i in 0..p {
            out[(i, j)] = (gp.flat[i] - gm.flat[i]) / (cast::<T>(2.0) * h);
        }
    }
    Ok(out)
}

/// Exact rank of each part of an assembled Hessian, in the given mode.
pub fn part_ranks<T: Scalar>(
    parts: &HessianParts<T>,
    mode: RankMode,
) -> Result<(usize, usize, usize), HessianError> {
    Ok((
        measure_rank(&parts.h_outer, mode)?,
        measure_rank(&parts.h_functional, mode)?,
        measure_rank(&parts.h_total, mode)?,
    ))
}
