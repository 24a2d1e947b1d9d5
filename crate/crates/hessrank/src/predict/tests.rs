use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::data::{compute_moments, gaussian_mixture, linear_teacher};
use crate::hessian::{assemble_linear, part_ranks};
use crate::model::{init_params, InitScheme};

type M = Matrix<f64>;

fn arch(r: usize, hidden: &[usize], k: usize, s: usize) -> ArchitectureSummary {
    let mut widths = vec![r];
    widths.extend_from_slice(hidden);
    widths.push(k);
    let spec = NetworkSpec::linear(widths).unwrap();
    summarize_counts(&spec, r, s)
}

#[test]
fn summary_arithmetic() {
    let a = arch(64, &[30, 20], 10, 10);
    assert_eq!((a.q, a.q_s, a.m, a.depth, a.p), (10, 10, 50, 3, 2720));
    let b = arch(64, &[5, 20], 10, 10);
    assert_eq!(b.q, 5);
    // bias case q', s'
    let spec = NetworkSpec::new(vec![64, 25, 25, 10], crate::model::Activation::Identity, true, LossKind::Mse).unwrap();
    let c = summarize_counts(&spec, 64, 10);
    assert_eq!((c.q_prime, c.s_prime), (10, 10));
}

#[test]
fn linear_prediction_frozen_instances() {
    // non-bottleneck instance
    let p = predict_linear(&arch(64, &[30, 20], 10, 10));
    assert_eq!(p.outer, 640);
    assert_eq!(p.functional_columns, vec![300, 400, 200]);
    assert_eq!(p.functional, Some(900));
    assert_eq!(p.total, Some(1440));
    assert_eq!(p.deficiency, Some(1280));
    assert_eq!(p.outer_status, Exactness::ProvedEquality);
    assert_eq!(p.total_status, Exactness::TightEmpirical);
    // overlap identity: outer + functional − total = 2qs − q²
    assert_eq!(640 + 900 - 1440, 2 * 10 * 10 - 100);

    // bottleneck instance
    let p = predict_linear(&arch(64, &[5, 20], 10, 10));
    assert_eq!(p.outer, 345);
    assert_eq!(p.functional, Some(275));
    assert_eq!(p.total, Some(545));
    assert_eq!(345 + 275 - 545, 2 * 5 * 10 - 25);

    // deeper paper architecture
    let p = predict_linear(&arch(64, &[50, 20, 20, 20], 10, 10));
    assert_eq!(p.total, Some(2440));
}

#[test]
fn one_layer_prediction() {
    let p = predict_linear(&arch(7, &[], 4, 4));
    assert_eq!(p.outer, 28);
    assert_eq!(p.functional, Some(0));
    assert_eq!(p.total, Some(28));
}

#[test]
fn bias_prediction_frozen_instances() {
    // H_o = q(r+K−q) + K
    let spec = NetworkSpec::new(vec![64, 25, 25, 10], crate::model::Activation::Identity, true, LossKind::Mse).unwrap();
    let a = summarize_counts(&spec, 64, 10);
    let p = predict_bias(&a);
    assert_eq!(p.outer, 650);
    assert_eq!(p.outer_status, Exactness::ProvedBound);
    // L=3 total: 2·10·50 + 10·74 − 300 + 30
    assert_eq!(p.total, Some(1470));

    // two-layer functional: 2·min(K, r+1)·M_1
    let spec2 = NetworkSpec::new(vec![64, 30, 10], crate::model::Activation::Identity, true, LossKind::Mse).unwrap();
    let a2 = summarize_counts(&spec2, 64, 10);
    let p2 = predict_bias(&a2);
    assert_eq!(p2.functional, Some(600));

    // bottleneck deeper net: only the proved outer bound
    let spec3 = NetworkSpec::new(vec![64, 5, 20, 10], crate::model::Activation::Identity, true, LossKind::Mse).unwrap();
    let a3 = summarize_counts(&spec3, 64, 10);
    let p3 = predict_bias(&a3);
    assert_eq!(p3.outer, 5 * (64 + 10 - 5) + 10);
    assert_eq!(p3.total, None);
    assert_eq!(p3.functional, None);
}

#[test]
fn relu_bound_frozen_instances() {
    // one hidden layer, all 30 neurons active
    let spec = NetworkSpec::new(vec![64, 30, 10], crate::model::Activation::Relu, false, LossKind::Mse).unwrap();
    let mut a = summarize_counts(&spec, 64, 10);
    a.m_tilde = Some(30);
    let b = predict_relu(&a, 64);
    assert_eq!(b.one_hidden, Some(2190));
    assert_eq!(a.p, 2220);
    // five dead neurons
    a.m_tilde = Some(25);
    assert_eq!(predict_relu(&a, 64).one_hidden, Some(1825));
    // deeper net: Fact-2 bound
    let spec = NetworkSpec::new(vec![64, 30, 20, 10], crate::model::Activation::Relu, false, LossKind::Mse).unwrap();
    let a = summarize_counts(&spec, 64, 10);
    assert_eq!(predict_relu(&a, 64).deep, 2720 - 0 - 50);
}

#[test]
fn cross_entropy_adjustment() {
    let a = arch(64, &[30, 20], 10, 10);
    let mse = adjust_for_loss(&a, LossKind::Mse).unwrap();
    assert_eq!(mse, a);
    let ce = adjust_for_loss(&a, LossKind::CrossEntropy).unwrap();
    assert_eq!(ce.q, 9);
    assert_eq!(ce.s, 9);
    let p = predict_linear(&ce);
    assert_eq!(p.total, Some(1314));
    // boundary: K = 2 collapses to K' = 1
    let a2 = arch(8, &[6], 2, 2);
    let ce2 = adjust_for_loss(&a2, LossKind::CrossEntropy).unwrap();
    assert_eq!((ce2.k, ce2.q), (1, 1));
    // K = 1 rejected
    let a1 = arch(8, &[6], 1, 1);
    assert!(matches!(
        adjust_for_loss(&a1, LossKind::CrossEntropy),
        Err(PredictError::CrossEntropyOutputTooSmall { k: 1 })
    ));
}

#[test]
fn prediction_monotone_in_unique_min_width() {
    // while the first hidden width is the unique minimum, widening it can
    // only increase every predicted rank
    let mut prev_total = 0;
    let mut prev_outer = 0;
    for w in 2..10 {
        let a = arch(64, &[w, 20], 30, 30);
        let p = predict_linear(&a);
        assert!(p.total.unwrap() >= prev_total);
        assert!(p.outer >= prev_outer);
        prev_total = p.total.unwrap();
        prev_outer = p.outer;
    }
}

fn random_rank_matrix(rows: usize, cols: usize, rank: usize, rng: &mut ChaCha8Rng) -> M {
    if rank == 0 {
        return M::zeros(rows, cols);
    }
    let a = M::from_fn(rows, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
    let b = M::from_fn(rank, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    a.matmul(&b)
}

#[test]
fn z_rank_formula_matches_svd_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..50 {
        let (m, n) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let (p, q) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let rank_c = rng.random_range(0..=m.min(n));
        let rank_d = rng.random_range(0..=p.min(q));
        let c = random_rank_matrix(m, n, rank_c, &mut rng);
        let d = random_rank_matrix(p, q, rank_d, &mut rng);
        let z = assemble_z(&c, &d, q, n);
        let measured = measure_rank(&z, RankMode::Exact).unwrap();
        let formula = z_rank(&c, &d, q, n).unwrap();
        assert_eq!(measured, formula, "trial {trial}: Z rank mismatch");
    }
}

#[test]
fn z_rank_degenerate_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let d = random_rank_matrix(3, 2, 2, &mut rng);
    let c0 = M::zeros(2, 3);
    assert_eq!(z_rank(&c0, &d, 2, 3).unwrap(), 3 * 2);
    let c = random_rank_matrix(2, 3, 2, &mut rng);
    let d0 = M::zeros(3, 2);
    assert_eq!(z_rank(&c, &d0, 2, 3).unwrap(), 2 * 2);
    // the spec instance: C rank 2 (2×3), D rank 2 (3×2) → 6
    assert_eq!(z_rank(&c, &d, 2, 3).unwrap(), 6);
    assert_eq!(assemble_z(&c, &d, 2, 3).shape(), (13, 6));
}

#[test]
fn outer_spectrum_matches_assembled_hessian() {
    let spec = NetworkSpec::linear(vec![5, 6, 3, 20]).unwrap();
    let params = init_params::<f64>(&spec, InitScheme::Gaussian, 7).unwrap();
    let ds = gaussian_mixture::<f64>(5, 4, 200, 1.0, 8).unwrap();
    let moments = compute_moments(&ds, &spec, &params).unwrap();
    let (parts, _) = assemble_linear(&spec, &params, &moments).unwrap();
    let measured = crate::linalg::sym_eig(&parts.h_outer, "h_o").unwrap();
    let predicted = predict_outer_spectrum(&spec, &params, &moments).unwrap();
    // nonzero spectra agree to 1e-9 relative
    let rank = measure_rank(&parts.h_outer, RankMode::Exact).unwrap();
    let top = measured.eigenvalues[0];
    for i in 0..rank {
        let a = measured.eigenvalues[i];
        let b = predicted.eigenvalues[i];
        assert!((a - b).abs() / top < 1e-9, "eigenvalue {i}: {a} vs {b}");
    }
    // K = 20 > M_{L-1} = 3: three plateau values, multiplicity ≥ 17
    assert_eq!(predicted.plateau_multiplicity, 17);
    assert_eq!(predicted.plateau_values.len(), 3);
    for &v in &predicted.plateau_values {
        let hits = measured
            .eigenvalues
            .iter()
            .filter(|&&e| (e - v).abs() / top < 1e-9)
            .count();
        assert!(hits >= 17, "plateau value {v} has multiplicity {hits}");
    }
}

#[test]
fn outer_spectrum_no_plateaus_when_output_small() {
    let spec = NetworkSpec::linear(vec![5, 6, 3]).unwrap();
    let params = init_params::<f64>(&spec, InitScheme::Gaussian, 9).unwrap();
    let ds = gaussian_mixture::<f64>(5, 3, 100, 1.0, 10).unwrap();
    let moments = compute_moments(&ds, &spec, &params).unwrap();
    let predicted = predict_outer_spectrum(&spec, &params, &moments).unwrap();
    assert!(predicted.plateau_values.is_empty());
    assert_eq!(predicted.plateau_multiplicity, 0);
}

#[test]
fn functional_spectrum_matches_assembled_hessian() {
    let spec = NetworkSpec::linear(vec![5, 15, 3]).unwrap();
    let params = init_params::<f64>(&spec, InitScheme::Gaussian, 11).unwrap();
    let ds = gaussian_mixture::<f64>(5, 3, 150, 1.5, 12).unwrap();
    let moments = compute_moments(&ds, &spec, &params).unwrap();
    assert_eq!(moments.s, 3, "s should saturate at K");
    let (parts, _) = assemble_linear(&spec, &params, &moments).unwrap();
    let measured = crate::linalg::sym_eig(&parts.h_functional, "h_f").unwrap();
    let predicted = predict_functional_spectrum(&spec, &moments).unwrap();
    assert_eq!(predicted.len(), measured.eigenvalues.len());
    let top = measured.eigenvalues[0].abs();
    for (i, (&a, &b)) in measured.eigenvalues.iter().zip(&predicted).enumerate() {
        assert!((a - b).abs() / top < 1e-9, "eigenvalue {i}: measured {a} vs predicted {b}");
    }
    // 2K plateaus of width M_1: each ±σ_i(Ω) appears 15 times
    let distinct = 2 * 3;
    assert_eq!(predicted.iter().filter(|&&v| v.abs() > 1e-10 * top).count(), distinct * 15);
}

#[test]
fn functional_spectrum_zero_omega() {
    let spec = NetworkSpec::linear(vec![4, 6, 3]).unwrap();
    let params = init_params::<f64>(&spec, InitScheme::Gaussian, 13).unwrap();
    let x = M::from_fn(4, 20, |i, j| ((i + j) as f64 * 0.3).sin());
    let y = crate::model::forward(&spec, &params, &x).unwrap().outputs().clone();
    let ds = crate::data::Dataset::new(x, y, crate::data::LabelKind::RealValued).unwrap();
    let moments = compute_moments(&ds, &spec, &params).unwrap();
    let predicted = predict_functional_spectrum(&spec, &moments).unwrap();
    assert!(predicted.iter().all(|&v| v == 0.0));
    // deeper nets rejected
    let deep = NetworkSpec::linear(vec![4, 6, 6, 3]).unwrap();
    assert!(matches!(
        predict_functional_spectrum(&deep, &moments),
        Err(PredictError::NotTwoLayer { depth: 3 })
    ));
}

#[test]
fn predictions_match_measured_ranks_small_instance() {
    // an end-to-end miniature of the acceptance gate
    let spec = NetworkSpec::linear(vec![12, 8, 6]).unwrap();
    let params = init_params::<f64>(&spec, InitScheme::Uniform, 15).unwrap();
    let ds = linear_teacher::<f64>(12, 6, 100, 16).unwrap();
    let moments = compute_moments(&ds, &spec, &params).unwrap();
    let summary = summarize(&spec, &moments);
    let pred = predict_linear(&summary);
    let (parts, _) = assemble_linear(&spec, &params, &moments).unwrap();
    let (rank_o, rank_f, rank_t) = part_ranks(&parts, RankMode::Exact).unwrap();
    assert_eq!(rank_o, pred.outer);
    assert_eq!(rank_f, pred.functional.unwrap());
    assert_eq!(rank_t, pred.total.unwrap());
    for l in 1..=spec.depth() {
        let measured = measure_rank(&parts.functional_column_block(l), RankMode::Exact).unwrap();
        assert_eq!(measured, pred.functional_columns[l - 1], "column {l}");
    }
}
