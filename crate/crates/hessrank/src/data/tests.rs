use std::io::Write;

use super::*;
use crate::model::{init_params, Activation, InitScheme, LossKind};

type M = Matrix<f64>;

#[test]
fn mixture_covariance_has_full_rank() {
    let ds = gaussian_mixture::<f64>(5, 3, 300, 2.0, 1).unwrap();
    let sigma = ds.inputs.matmul(&ds.inputs.transpose()).scale(1.0 / 300.0);
    assert_eq!(measure_rank(&sigma, RankMode::Exact).unwrap(), 5);
    assert_eq!(ds.output_dim(), 3);
    // equal cluster sizes up to remainder
    let counts: Vec<usize> = (0..3)
        .map(|c| (0..300).filter(|&j| ds.targets[(c, j)] == 1.0).count())
        .collect();
    assert_eq!(counts, vec![100, 100, 100]);
}

#[test]
fn isotropic_limit_approaches_identity() {
    let ds = gaussian_mixture::<f64>(4, 2, 10_000, 0.0, 2).unwrap();
    let sigma = ds.inputs.matmul(&ds.inputs.transpose()).scale(1.0 / 10_000.0);
    assert!(sigma.max_abs_diff(&M::identity(4)) < 0.2);
}

#[test]
fn mixture_is_deterministic() {
    let a = gaussian_mixture::<f64>(6, 3, 50, 1.5, 9).unwrap();
    let b = gaussian_mixture::<f64>(6, 3, 50, 1.5, 9).unwrap();
    assert_eq!(a.inputs, b.inputs);
    assert_eq!(a.targets, b.targets);
}

#[test]
fn mixture_rejects_too_few_samples() {
    assert!(matches!(
        gaussian_mixture::<f64>(4, 5, 3, 1.0, 0),
        Err(DataError::TooFewSamples { .. })
    ));
}

fn write_idx_pair(dir: &Path, images: &[u8], labels: &[u8], count: usize, rows: usize, cols: usize) -> PathBuf {
    let images_path = dir.join("t-images-idx3-ubyte");
    let labels_path = dir.join("t-labels-idx1-ubyte");
    let mut f = std::fs::File::create(&images_path).unwrap();
    f.write_all(&0x0000_0803u32.to_be_bytes()).unwrap();
    f.write_all(&(count as u32).to_be_bytes()).unwrap();
    f.write_all(&(rows as u32).to_be_bytes()).unwrap();
    f.write_all(&(cols as u32).to_be_bytes()).unwrap();
    f.write_all(images).unwrap();
    let mut f = std::fs::File::create(&labels_path).unwrap();
    f.write_all(&0x0000_0801u32.to_be_bytes()).unwrap();
    f.write_all(&(count as u32).to_be_bytes()).unwrap();
    f.write_all(labels).unwrap();
    images_path
}

#[test]
fn idx_roundtrip_with_downsampling() {
    let dir = tempfile::tempdir().unwrap();
    let count = 10;
    let mut images = Vec::new();
    for j in 0..count {
        for px in 0..28 * 28 {
            images.push(((j * 37 + px * 13) % 256) as u8);
        }
    }
    let labels: Vec<u8> = (0..count).map(|j| (j % 3) as u8).collect();
    let path = write_idx_pair(dir.path(), &images, &labels, count, 28, 28);
    let ds = load_dataset::<f64>(&path, FileFormat::Idx, Some(64)).unwrap();
    assert_eq!(ds.input_dim(), 64);
    assert_eq!(ds.num_samples(), 10);
    assert_eq!(ds.output_dim(), 3);
    assert!(ds.inputs.max_abs() <= 1.0);
    assert!(ds.inputs.as_slice().iter().all(|&v| v >= 0.0));
    assert_eq!(ds.label_kind, LabelKind::OneHot);
}

#[test]
fn pooling_preserves_constant_images() {
    let dir = tempfile::tempdir().unwrap();
    let images = vec![200u8; 28 * 28];
    let path = write_idx_pair(dir.path(), &images, &[1], 1, 28, 28);
    let ds = load_dataset::<f64>(&path, FileFormat::Idx, Some(64)).unwrap();
    let expect = 200.0 / 255.0;
    for i in 0..64 {
        assert!((ds.inputs[(i, 0)] - expect).abs() < 1e-14);
    }
}

#[test]
fn random_images_give_full_covariance_rank() {
    let dir = tempfile::tempdir().unwrap();
    let count = 300;
    let mut state = 12345u64;
    let mut images = Vec::with_capacity(count * 28 * 28);
    for _ in 0..count * 28 * 28 {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        images.push((state >> 56) as u8);
    }
    let labels: Vec<u8> = (0..count).map(|j| (j % 10) as u8).collect();
    let path = write_idx_pair(dir.path(), &images, &labels, count, 28, 28);
    let ds = load_dataset::<f64>(&path, FileFormat::Idx, Some(64)).unwrap();
    let sigma = ds.inputs.matmul(&ds.inputs.transpose()).scale(1.0 / count as f64);
    assert_eq!(measure_rank(&sigma, RankMode::Exact).unwrap(), 64);
}

#[test]
fn idx_error_paths_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    // wrong magic
    let bad = dir.path().join("bad-images-idx3-ubyte");
    std::fs::write(&bad, 0x0000_0807u32.to_be_bytes()).unwrap();
    let labels = dir.path().join("bad-labels-idx1-ubyte");
    std::fs::write(&labels, 0x0000_0801u32.to_be_bytes()).unwrap();
    assert!(matches!(
        load_dataset::<f64>(&bad, FileFormat::Idx, None),
        Err(DataError::BadMagic { .. })
    ));
    // truncated payload
    let path = write_idx_pair(dir.path(), &[1, 2, 3], &[0], 1, 2, 2);
    assert!(matches!(
        load_dataset::<f64>(&path, FileFormat::Idx, None),
        Err(DataError::Truncated { .. })
    ));
    // non-square pooling target
    let images = vec![0u8; 28 * 28];
    let path = write_idx_pair(dir.path(), &images, &[0], 1, 28, 28);
    assert!(matches!(
        load_dataset::<f64>(&path, FileFormat::Idx, Some(50)),
        Err(DataError::NonSquarePool { target: 50 })
    ));
}

#[test]
fn csv_loading_with_and_without_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    std::fs::write(&path, "label,a,b\n1,10,20\n0,30,40\n2,50,60\n").unwrap();
    let ds = load_dataset::<f64>(&path, FileFormat::Csv { has_header: true }, None).unwrap();
    assert_eq!(ds.num_samples(), 3);
    assert_eq!(ds.input_dim(), 2);
    assert_eq!(ds.output_dim(), 3);
    // byte-range features are rescaled
    assert!((ds.inputs[(0, 0)] - 10.0 / 255.0).abs() < 1e-15);
    assert_eq!(ds.targets[(1, 0)], 1.0);

    let path2 = dir.path().join("noheader.csv");
    std::fs::write(&path2, "0,0.5,0.25\n1,0.1,0.9\n").unwrap();
    let ds2 = load_dataset::<f64>(&path2, FileFormat::Csv { has_header: false }, None).unwrap();
    assert_eq!(ds2.num_samples(), 2);
    // already in [0,1]: untouched
    assert_eq!(ds2.inputs[(0, 0)], 0.5);
}

#[test]
fn csv_rejects_ragged_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ragged.csv");
    std::fs::write(&path, "0,1,2\n1,3\n").unwrap();
    assert!(matches!(
        load_dataset::<f64>(&path, FileFormat::Csv { has_header: false }, None),
        Err(DataError::Csv { line: 2, .. })
    ));
}

#[test]
fn center_mean_is_identity_on_centered_data() {
    // exact ± pairs make the column mean exactly zero
    let mut inputs = M::zeros(3, 6);
    for j in 0..3 {
        for i in 0..3 {
            let v = (i as f64 + 1.0) * (j as f64 + 0.5);
            inputs[(i, 2 * j)] = v;
            inputs[(i, 2 * j + 1)] = -v;
        }
    }
    let targets = M::from_fn(2, 6, |i, j| if j % 2 == i % 2 { 1.0 } else { 0.0 });
    let ds = Dataset::new(inputs.clone(), targets, LabelKind::OneHot).unwrap();
    let (out, tr) = preprocess(&ds, &[PreprocessStep::CenterMean]).unwrap();
    assert!(out.inputs.max_abs_diff(&inputs) < 1e-14);
    assert!(tr.mean.unwrap().max_abs() < 1e-14);
}

#[test]
fn reduce_to_rank_embeds_low_rank_inputs() {
    // rank-3 inputs embedded in d = 10
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
    let basis = M::from_fn(10, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
    let coeff = M::from_fn(3, 40, |_, _| rng.sample::<f64, _>(StandardNormal));
    let inputs = basis.matmul(&coeff);
    let targets = M::from_fn(2, 40, |i, j| if j % 2 == i { 1.0 } else { 0.0 });
    let ds = Dataset::new(inputs.clone(), targets, LabelKind::OneHot).unwrap();
    let (out, tr) = preprocess(&ds, &[PreprocessStep::ReduceToRank]).unwrap();
    assert_eq!(out.input_dim(), 3);
    let sigma = out.inputs.matmul(&out.inputs.transpose()).scale(1.0 / 40.0);
    let eigs = crate::linalg::sym_eig(&sigma, "sigma").unwrap();
    assert!(eigs.eigenvalues.iter().all(|&v| v > 1e-10), "reduced covariance not PD");
    // transform inverts on the retained subspace
    let back = tr.reconstruct_inputs(&out.inputs);
    assert!(back.max_abs_diff(&inputs) < 1e-10);

    // full-rank data passes through unchanged
    let full = gaussian_mixture::<f64>(4, 2, 60, 1.0, 3).unwrap();
    let (same, tr2) = preprocess(&full, &[PreprocessStep::ReduceToRank]).unwrap();
    assert_eq!(same.inputs, full.inputs);
    assert!(tr2.basis.is_none());
}

#[test]
fn class_centering_kills_sigma_yx() {
    let ds = gaussian_mixture::<f64>(6, 3, 120, 2.0, 7).unwrap();
    let (out, _) = preprocess(&ds, &[PreprocessStep::CenterClasses]).unwrap();
    let sigma_yx = out.targets.matmul(&out.inputs.transpose()).scale(1.0 / 120.0);
    assert!(sigma_yx.max_abs() < 1e-10);
}

#[test]
fn class_centering_requires_one_hot() {
    let ds = linear_teacher::<f64>(4, 2, 30, 1).unwrap();
    assert!(matches!(
        preprocess(&ds, &[PreprocessStep::CenterClasses]),
        Err(DataError::NeedsOneHot(_))
    ));
}

#[test]
fn moments_perfect_fit_has_zero_omega() {
    let spec = NetworkSpec::linear(vec![5, 4, 3]).unwrap();
    let params = init_params::<f64>(&spec, InitScheme::Gaussian, 3).unwrap();
    let x = M::from_fn(5, 20, |i, j| ((i + j) as f64 * 0.2).cos());
    let y = forward(&spec, &params, &x).unwrap().outputs().clone();
    let ds = Dataset::new(x, y, LabelKind::RealValued).unwrap();
    let m = compute_moments(&ds, &spec, &params).unwrap();
    assert_eq!(m.omega.max_abs(), 0.0);
    assert_eq!(m.s, 0);
}

#[test]
fn moments_at_init_saturate_s() {
    let spec = NetworkSpec::linear(vec![20, 15, 10]).unwrap();
    let params = init_params::<f64>(&spec, InitScheme::Gaussian, 8).unwrap();
    let ds = gaussian_mixture::<f64>(20, 10, 200, 1.0, 9).unwrap();
    let m = compute_moments(&ds, &spec, &params).unwrap();
    assert_eq!(m.r, 20);
    assert_eq!(m.s, 10, "s saturates at min(K, r)");
    assert!(m.s <= m.r.min(10));
}

#[test]
fn omega_definition_matches_algebraic_route() {
    let spec = NetworkSpec::linear(vec![7, 6, 4]).unwrap();
    let params = init_params::<f64>(&spec, InitScheme::Uniform, 12).unwrap();
    let ds = linear_teacher::<f64>(7, 4, 50, 13).unwrap();
    let m = compute_moments(&ds, &spec, &params).unwrap();
    let w = crate::model::chain(&params, 2, 1).unwrap();
    let algebraic = &w.matmul(&m.sigma_xx) - &m.sigma_yx;
    assert!(m.omega.max_abs_diff(&algebraic) < 1e-12);
}

#[test]
fn sigma_xx_is_symmetric_psd() {
    let ds = gaussian_mixture::<f64>(8, 3, 100, 1.0, 4).unwrap();
    let spec = NetworkSpec::linear(vec![8, 3]).unwrap();
    let params = init_params::<f64>(&spec, InitScheme::Gaussian, 4).unwrap();
    let m = compute_moments(&ds, &spec, &params).unwrap();
    assert_eq!(m.sigma_xx.max_asymmetry(), 0.0);
    let eigs = crate::linalg::sym_eig(&m.sigma_xx, "sigma_xx").unwrap();
    assert!(eigs.eigenvalues.iter().all(|&v| v > -1e-10));
}

#[test]
fn subset_is_nested_prefix() {
    let ds = gaussian_mixture::<f64>(4, 2, 50, 1.0, 6).unwrap();
    let sub = ds.subset(20);
    assert_eq!(sub.num_samples(), 20);
    assert_eq!(sub.inputs.block(0, 0, 4, 20), ds.inputs.block(0, 0, 4, 20));
}

use rand::Rng;
use rand_distr::StandardNormal;
use crate::model::{forward, NetworkSpec};
