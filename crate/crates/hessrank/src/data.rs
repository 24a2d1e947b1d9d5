//! Dataset construction and ingestion, moment matrices, preprocessing.
//!
//! Inputs are stored column-per-sample (`d × N`), targets `K × N`. The moment
//! matrices `Σ_xx = E[xxᵀ]`, `Σ_yx = E[yxᵀ]` and the residual-input covariance
//! `Ω = E[δxᵀ]` use the empirical `1/N` mean throughout; their exact ranks `r`
//! and `s` gate every rank formula downstream.

use std::io::Read;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{measure_rank, Matrix, RankMode};
use crate::model::{forward, loss_from_outputs, NetworkSpec, Params};
use crate::scalar::{cast, cast_usize, Scalar};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad IDX magic in {path}: expected {expected:#010x}, got {got:#010x}")]
    BadMagic { path: PathBuf, expected: u32, got: u32 },
    #[error("truncated IDX payload in {path}")]
    Truncated { path: PathBuf },
    #[error("cannot derive labels path from {path} (expected 'images'/'idx3' in the name)")]
    NoLabelsPath { path: PathBuf },
    #[error("image and label counts disagree: {images} vs {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("downsample target {target} is not a perfect square")]
    NonSquarePool { target: usize },
    #[error("downsample side {target} exceeds image side {side}")]
    PoolTooLarge { target: usize, side: usize },
    #[error("csv parse error at line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("need at least {k} samples for {k} clusters, got {n}")]
    TooFewSamples { n: usize, k: usize },
    #[error("targets are not one-hot at column {col}")]
    NotOneHot { col: usize },
    #[error("{0} requires one-hot targets")]
    NeedsOneHot(&'static str),
    #[error("dataset is empty")]
    Empty,
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    OneHot,
    RealValued,
}

/// Column-per-sample dataset.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub inputs: Matrix<T>,
    pub targets: Matrix<T>,
    pub label_kind: LabelKind,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: Matrix<T>, targets: Matrix<T>, label_kind: LabelKind) -> Result<Self, DataError> {
        if inputs.cols() == 0 {
            return Err(DataError::Empty);
        }
        assert_eq!(inputs.cols(), targets.cols(), "inputs and targets disagree on N");
        if label_kind == LabelKind::OneHot {
            for j in 0..targets.cols() {
                let mut ones = 0;
                for i in 0..targets.rows() {
                    let v = targets[(i, j)];
                    if v == T::one() {
                        ones += 1;
                    } else if v != T::zero() {
                        return Err(DataError::NotOneHot { col: j });
                    }
                }
                if ones != 1 {
                    return Err(DataError::NotOneHot { col: j });
                }
            }
        }
        Ok(Self { inputs, targets, label_kind })
    }

    pub fn num_samples(&self) -> usize {
        self.inputs.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.rows()
    }

    /// First `n` samples; the nesting makes sample-size sweeps monotone.
    pub fn subset(&self, n: usize) -> Self {
        assert!(n >= 1 && n <= self.num_samples(), "subset size out of range");
        Self {
            inputs: self.inputs.block(0, 0, self.inputs.rows(), n),
            targets: self.targets.block(0, 0, self.targets.rows(), n),
            label_kind: self.label_kind,
        }
    }
}

/// Data-and-parameter statistics. `sigma_xx` is symmetrized on construction;
/// `r` and `s` are exact-mode ranks. The first moments `mean_x` and
/// `mean_residual` are carried along so the analytic Hessian assembly of bias
/// networks stays exact on uncentered data.
#[derive(Debug, Clone)]
pub struct Moments<T> {
    pub sigma_xx: Matrix<T>,
    pub sigma_yx: Matrix<T>,
    pub omega: Matrix<T>,
    pub mean_x: Matrix<T>,
    pub mean_residual: Matrix<T>,
    pub r: usize,
    pub s: usize,
}

/// `K` Gaussian clusters with means at radius `centers_spread`, one-hot
/// labels, equal cluster sizes up to the remainder.
pub fn gaussian_mixture<T: Scalar>(
    d: usize,
    k: usize,
    n: usize,
    centers_spread: f64,
    seed: u64,
) -> Result<Dataset<T>, DataError> {
    if n < k {
        return Err(DataError::TooFewSamples { n, k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(k);
    for _ in 0..k {
        let raw: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        centers.push(raw.into_iter().map(|v| centers_spread * v / norm).collect::<Vec<f64>>());
    }
    let mut inputs = Matrix::zeros(d, n);
    let mut targets = Matrix::zeros(k, n);
    for j in 0..n {
        let class = j % k;
        for i in 0..d {
            inputs[(i, j)] = cast::<T>(centers[class][i] + rng.sample::<f64, _>(StandardNormal));
        }
        targets[(class, j)] = T::one();
    }
    Dataset::new(inputs, targets, LabelKind::OneHot)
}

/// Standard-Gaussian inputs labeled by a random linear teacher `y = T x`.
/// Real-valued targets; the rows of the teacher are sampled `N(0, 1/d)`.
pub fn linear_teacher<T: Scalar>(d: usize, k: usize, n: usize, seed: u64) -> Result<Dataset<T>, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = (1.0 / d as f64).sqrt();
    let teacher = Matrix::<T>::from_fn(k, d, |_, _| cast::<T>(scale * rng.sample::<f64, _>(StandardNormal)));
    let inputs = Matrix::<T>::from_fn(d, n, |_, _| cast::<T>(rng.sample::<f64, _>(StandardNormal)));
    let targets = teacher.matmul(&inputs);
    Dataset::new(inputs, targets, LabelKind::RealValued)
}

/// Source file format for [`load_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    /// Big-endian IDX pair (path names the images file; the labels file is
    /// derived by replacing `images` with `labels` and `idx3` with `idx1`).
    Idx,
    /// One sample per row, label in the first column.
    Csv { has_header: bool },
}

/// Loads a dataset from disk. Pixel values land in `[0, 1]`; labels are
/// one-hot encoded; `downsample_to` average-pools images onto a
/// `√d′ × √d′` grid.
pub fn load_dataset<T: Scalar>(
    path: &Path,
    format: FileFormat,
    downsample_to: Option<usize>,
) -> Result<Dataset<T>, DataError> {
    let (mut inputs, labels) = match format {
        FileFormat::Idx => {
            let labels_path = derive_labels_path(path)?;
            let (count, rows, cols, pixels) = read_idx_images(path)?;
            let labels = read_idx_labels(&labels_path)?;
            if labels.len() != count {
                return Err(DataError::CountMismatch { images: count, labels: labels.len() });
            }
            let dim = rows * cols;
            let scale = cast::<T>(1.0 / 255.0);
            let mut m = Matrix::zeros(dim, count);
            for j in 0..count {
                for i in 0..dim {
                    m[(i, j)] = cast_usize::<T>(pixels[j * dim + i] as usize) * scale;
                }
            }
            (ImageBatch { data: m, rows, cols }, labels)
        }
        FileFormat::Csv { has_header } => read_csv(path, has_header)?,
    };
    if let Some(target) = downsample_to {
        inputs = downsample(inputs, target)?;
    }
    let k = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let n = labels.len();
    let mut targets = Matrix::zeros(k, n);
    for (j, &label) in labels.iter().enumerate() {
        targets[(label as usize, j)] = T::one();
    }
    Dataset::new(inputs.data, targets, LabelKind::OneHot)
}

struct ImageBatch<T> {
    data: Matrix<T>,
    rows: usize,
    cols: usize,
}

fn derive_labels_path(images: &Path) -> Result<PathBuf, DataError> {
    let name = images
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| DataError::NoLabelsPath { path: images.to_path_buf() })?;
    if !name.contains("images") {
        return Err(DataError::NoLabelsPath { path: images.to_path_buf() });
    }
    let labels = name.replace("images", "labels").replace("idx3", "idx1");
    Ok(images.with_file_name(labels))
}

fn read_u32_be(r: &mut impl Read, path: &Path) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| DataError::Truncated { path: path.to_path_buf() })?;
    Ok(u32::from_be_bytes(b))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads an IDX unsigned-byte image file: `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    let mut f = std::fs::File::open(path)
        .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let magic = read_u32_be(&mut f, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic { path: path.to_path_buf(), expected: IDX_IMAGES_MAGIC, got: magic });
    }
    let count = read_u32_be(&mut f, path)? as usize;
    let rows = read_u32_be(&mut f, path)? as usize;
    let cols = read_u32_be(&mut f, path)? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    f.read_exact(&mut pixels).map_err(|_| DataError::Truncated { path: path.to_path_buf() })?;
    Ok((count, rows, cols, pixels))
}

/// Reads an IDX unsigned-byte label file.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut f = std::fs::File::open(path)
        .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let magic = read_u32_be(&mut f, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic { path: path.to_path_buf(), expected: IDX_LABELS_MAGIC, got: magic });
    }
    let count = read_u32_be(&mut f, path)? as usize;
    let mut labels = vec![0u8; count];
    f.read_exact(&mut labels).map_err(|_| DataError::Truncated { path: path.to_path_buf() })?;
    Ok(labels)
}

fn read_csv<T: Scalar>(path: &Path, has_header: bool) -> Result<(ImageBatch<T>, Vec<u8>), DataError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let mut labels = Vec::new();
    let mut rows_data: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 && has_header {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label_field = fields.next().ok_or(DataError::Csv { line: idx + 1, msg: "empty row".into() })?;
        let label: u8 = label_field
            .trim()
            .parse()
            .map_err(|e| DataError::Csv { line: idx + 1, msg: format!("label: {e}") })?;
        let values: Result<Vec<f64>, _> = fields.map(|f| f.trim().parse::<f64>()).collect();
        let values = values.map_err(|e| DataError::Csv { line: idx + 1, msg: format!("value: {e}") })?;
        if let Some(first) = rows_data.first() {
            if first.len() != values.len() {
                return Err(DataError::Csv { line: idx + 1, msg: "ragged row".into() });
            }
        }
        labels.push(label);
        rows_data.push(values);
    }
    if rows_data.is_empty() {
        return Err(DataError::Empty);
    }
    let dim = rows_data[0].len();
    // Byte-valued feature files (e.g. MNIST-as-CSV) are rescaled to [0, 1];
    // data already in range is left untouched.
    let max = rows_data.iter().flatten().cloned().fold(f64::MIN, f64::max);
    let min = rows_data.iter().flatten().cloned().fold(f64::MAX, f64::min);
    let scale = if max > 1.0 && min >= 0.0 { 1.0 / 255.0 } else { 1.0 };
    let m = Matrix::from_fn(dim, rows_data.len(), |i, j| cast::<T>(rows_data[j][i] * scale));
    let side = (dim as f64).sqrt().round() as usize;
    let (rows, cols) = if side * side == dim { (side, side) } else { (1, dim) };
    Ok((ImageBatch { data: m, rows, cols }, labels))
}

/// Non-overlapping average pooling onto a `t × t` grid with cell boundaries
/// `round(i * side / t)`; constants are preserved exactly up to rounding.
fn downsample<T: Scalar>(batch: ImageBatch<T>, target: usize) -> Result<ImageBatch<T>, DataError> {
    let t = (target as f64).sqrt().round() as usize;
    if t * t != target {
        return Err(DataError::NonSquarePool { target });
    }
    if t > batch.rows || t > batch.cols {
        return Err(DataError::PoolTooLarge { target: t, side: batch.rows.min(batch.cols) });
    }
    let bounds = |side: usize, i: usize| -> (usize, usize) {
        let lo = (i * side) as f64 / t as f64;
        let hi = ((i + 1) * side) as f64 / t as f64;
        (lo.round() as usize, hi.round() as usize)
    };
    let n = batch.data.cols();
    let mut out = Matrix::zeros(target, n);
    for j in 0..n {
        for bi in 0..t {
            let (r0, r1) = bounds(batch.rows, bi);
            for bj in 0..t {
                let (c0, c1) = bounds(batch.cols, bj);
                let mut acc = T::zero();
                for r in r0..r1 {
                    for c in c0..c1 {
                        acc += batch.data[(r * batch.cols + c, j)];
                    }
                }
                out[(bi * t + bj, j)] = acc / cast_usize::<T>((r1 - r0) * (c1 - c0));
            }
        }
    }
    Ok(ImageBatch { data: out, rows: t, cols: t })
}

/// Preprocessing steps, applied in the order given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessStep {
    CenterMean,
    CenterClasses,
    ReduceToRank,
}

/// Record of an applied preprocessing pipeline; `reconstruct_inputs` inverts
/// it on the retained subspace.
#[derive(Debug, Clone)]
pub struct PreTransform<T> {
    pub mean: Option<Matrix<T>>,
    pub class_means: Option<Matrix<T>>,
    pub basis: Option<Matrix<T>>,
}

impl<T: Scalar> PreTransform<T> {
    /// Maps reduced inputs back to the original coordinates (class centering
    /// is not inverted sample-wise; only the subspace embedding and the global
    /// mean are restored).
    pub fn reconstruct_inputs(&self, inputs: &Matrix<T>) -> Matrix<T> {
        let mut x = match &self.basis {
            Some(b) => b.matmul(inputs),
            None => inputs.clone(),
        };
        if let Some(mean) = &self.mean {
            for j in 0..x.cols() {
                for i in 0..x.rows() {
                    x[(i, j)] += mean[(i, 0)];
                }
            }
        }
        x
    }
}

/// Applies the requested steps; the recorded transform is returned with the
/// new dataset.
pub fn preprocess<T: Scalar>(
    dataset: &Dataset<T>,
    steps: &[PreprocessStep],
) -> Result<(Dataset<T>, PreTransform<T>), DataError> {
    let mut inputs = dataset.inputs.clone();
    let mut transform = PreTransform { mean: None, class_means: None, basis: None };
    for step in steps {
        match step {
            PreprocessStep::CenterMean => {
                let n = cast_usize::<T>(inputs.cols());
                let mean = Matrix::from_fn(inputs.rows(), 1, |i, _| {
                    (0..inputs.cols()).map(|j| inputs[(i, j)]).sum::<T>() / n
                });
                for j in 0..inputs.cols() {
                    for i in 0..inputs.rows() {
                        inputs[(i, j)] -= mean[(i, 0)];
                    }
                }
                transform.mean = Some(mean);
            }
            PreprocessStep::CenterClasses => {
                if dataset.label_kind != LabelKind::OneHot {
                    return Err(DataError::NeedsOneHot("center_classes"));
                }
                let k = dataset.targets.rows();
                let mut means = Matrix::zeros(inputs.rows(), k);
                let mut counts = vec![0usize; k];
                for j in 0..inputs.cols() {
                    let class = (0..k).find(|&c| dataset.targets[(c, j)] == T::one()).expect("one-hot");
                    counts[class] += 1;
                    for i in 0..inputs.rows() {
                        means[(i, class)] += inputs[(i, j)];
                    }
                }
                for c in 0..k {
                    if counts[c] > 0 {
                        let inv = T::one() / cast_usize::<T>(counts[c]);
                        for i in 0..inputs.rows() {
                            means[(i, c)] *= inv;
                        }
                    }
                }
                for j in 0..inputs.cols() {
                    let class = (0..k).find(|&c| dataset.targets[(c, j)] == T::one()).expect("one-hot");
                    for i in 0..inputs.rows() {
                        inputs[(i, j)] -= means[(i, class)];
                    }
                }
                transform.class_means = Some(means);
            }
            PreprocessStep::ReduceToRank => {
                let r = measure_rank(&inputs, RankMode::Exact)?;
                if r < inputs.rows() {
                    let decomp = crate::linalg::svd(&inputs)?;
                    let basis = decomp.left_vectors.block(0, 0, inputs.rows(), r);
                    inputs = basis.transpose().matmul(&inputs);
                    transform.basis = Some(basis);
                }
            }
        }
    }
    let new = Dataset::new(inputs, dataset.targets.clone(), dataset.label_kind)?;
    Ok((new, transform))
}

/// Empirical moments: `Σ̂_xx`, `Σ̂_yx`, and `Ω̂` from the actual residuals of
/// the network on this dataset, plus their exact ranks.
pub fn compute_moments<T: Scalar>(
    dataset: &Dataset<T>,
    spec: &NetworkSpec,
    params: &Params<T>,
) -> Result<Moments<T>, DataError> {
    let n = cast_usize::<T>(dataset.num_samples());
    let inv_n = T::one() / n;
    let xt = dataset.inputs.transpose();
    let sigma_xx = dataset.inputs.matmul(&xt).scale(inv_n).symmetrized();
    let sigma_yx = dataset.targets.matmul(&xt).scale(inv_n);
    let cache = forward(spec, params, &dataset.inputs)?;
    let eval = loss_from_outputs(spec, cache.outputs(), &dataset.targets)?;
    let omega = eval.residuals.matmul(&xt).scale(inv_n);
    let mean_x = dataset.inputs.row_sums().scale(inv_n);
    let mean_residual = eval.residuals.row_sums().scale(inv_n);
    let r = measure_rank(&sigma_xx, RankMode::Exact)?;
    let s = measure_rank(&omega, RankMode::Exact)?;
    Ok(Moments { sigma_xx, sigma_yx, omega, mean_x, mean_residual, r, s })
}

#[cfg(test)]
mod tests;
