use std::f64::consts::PI;

use nalgebra::DVector;
use num_complex::Complex64 as C64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chanpred::channel::{channel_response, sample_grid, ChannelConfig, Path, PathSet, UMA_DELAYS_NS};
use chanpred::crb::{build_fim, param_order};
use chanpred::harness::{empirical_cdf, match_paths, match_structural, model_dims};
use chanpred::linfix::angular_distance;
use chanpred::numkernel::{gram, hadamard, hermitian_eig, khatri_rao, kron, ls_solve_regularized, vec, ComplexMatrix};
use chanpred::predictor::{fit, predict, FitOptions, PredictionRequest};
use chanpred::stacking::{build_stacked, column_model_check, ModelKind};
use chanpred::subspace::split;

fn cmat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> ComplexMatrix {
    ComplexMatrix::from_fn(r, c, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

fn rel(a: &ComplexMatrix, b: &ComplexMatrix) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Rays on distinct delays of the UMA list, so every pair is separated in frequency.
fn paths(z: usize, rng: &mut ChaCha8Rng) -> PathSet {
    let delays: Vec<f64> = UMA_DELAYS_NS.iter().step_by(if z <= 3 { 2 } else { 1 }).copied().collect();
    PathSet::new(
        (0..z)
            .map(|i| Path {
                beta: C64::new(rng.random_range(0.5..1.0), 0.0) * C64::from_polar(1.0, rng.random_range(-PI..PI)),
                aoa_rad: rng.random_range(-1.3..1.3),
                aod_rad: rng.random_range(-1.3..1.3),
                delay_s: delays[i] * 1e-9,
                doppler_rad_per_s: rng.random_range(-490.0..490.0),
            })
            .collect(),
    )
    .unwrap()
}

fn grid(n_rx: usize, n_tx: usize, q: usize, k: usize) -> ChannelConfig {
    ChannelConfig { n_rx, n_tx, n_time: q, n_freq: k, ..ChannelConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kron_associative_and_vec_identity(seed: u64, d in prop::array::uniform5(1usize..4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c) = (cmat(&mut rng, d[0], d[1]), cmat(&mut rng, d[2], d[3]), cmat(&mut rng, d[4], d[0]));
        // Entries are the same triple products, associated differently: equal up to rounding.
        let (l, r) = (kron(&kron(&a, &b), &c), kron(&a, &kron(&b, &c)));
        prop_assert_eq!(l.shape(), r.shape());
        prop_assert!(l.iter().zip(r.iter()).all(|(x, y)| (x - y).norm() <= 1e-15 * y.norm().max(1.0)));
        let x = cmat(&mut rng, d[1], d[3]);
        let lhs = vec(&(&a * &x * b.transpose()));
        let rhs = kron(&b, &a) * vec(&x);
        prop_assert!((lhs - &rhs).norm() <= 1e-10 * rhs.norm().max(1.0));
    }

    #[test]
    fn khatri_rao_gram_is_hadamard_of_grams(seed: u64, rows in (1usize..5, 1usize..5), cols in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (cmat(&mut rng, rows.0, cols), cmat(&mut rng, rows.1, cols));
        let kr = khatri_rao(&a, &b).unwrap();
        let lhs = kr.adjoint() * &kr;
        let rhs = hadamard(&(a.adjoint() * &a), &(b.adjoint() * &b)).unwrap();
        prop_assert!(rel(&lhs, &rhs) <= 1e-10);
    }

    #[test]
    fn eig_preserves_trace(seed: u64, n in 1usize..12, m in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = gram(&cmat(&mut rng, m, n));
        let total: f64 = hermitian_eig(&c).unwrap().values.iter().map(|v| v.re).sum();
        let tr = c.trace().re;
        prop_assert!((total - tr).abs() <= 1e-9 * tr.abs().max(1.0));
    }

    #[test]
    fn unregularized_ls_is_pseudo_inverse(seed: u64, n in 1usize..6, extra in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = cmat(&mut rng, n + extra, n);
        let y = DVector::from_fn(n + extra, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let got = ls_solve_regularized(&w, &y, 0.0).unwrap();
        let svd = w.clone().svd(true, true);
        let want = svd.solve(&y, 1e-14).unwrap();
        prop_assert!((&got - &want).norm() <= 1e-8 * want.norm().max(1.0));
    }

    #[test]
    fn response_is_linear_in_paths(seed: u64, za in 1usize..4, zb in 1usize..4, q in -5i64..40, k in -3i64..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = grid(2, 3, 8, 8);
        let (a, b) = (paths(za, &mut rng), paths(zb, &mut rng));
        let union = PathSet::new(a.paths().iter().chain(b.paths()).copied().collect()).unwrap();
        let sum = channel_response(&a, &cfg, q, k) + channel_response(&b, &cfg, q, k);
        prop_assert!((channel_response(&union, &cfg, q, k) - &sum).norm() <= 1e-12 * sum.norm().max(1.0));
    }

    #[test]
    fn spatial_frequency_round_trips(theta in -PI / 2.0..PI / 2.0) {
        let cfg = ChannelConfig::default();
        let p = Path { beta: C64::new(1.0, 0.0), aoa_rad: theta, aod_rad: 0.0, delay_s: 0.0, doppler_rad_per_s: 0.0 };
        let mu = p.normalized(&cfg).mu_r;
        prop_assert!(((mu / (2.0 * PI * cfg.d_rx_lambda)).asin() - theta).abs() <= 1e-12);
    }

    #[test]
    fn stacked_columns_follow_the_steering_model(seed: u64, z in 1usize..5, n_rx in 1usize..3, n_tx in 1usize..3,
                                                 q in 6usize..12, k in 6usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = grid(n_rx, n_tx, q, k);
        let ps = paths(z, &mut rng);
        let clean = sample_grid(&ps, &cfg);
        let (r, t) = (rng.random_range(1..=q), rng.random_range(1..=k));
        for model in ModelKind::ALL {
            let st = build_stacked(&clean, model, r, t).unwrap();
            prop_assert!(column_model_check(&st, &ps, &cfg).unwrap() <= 1e-9, "{model}");
        }
        // Block-Hankel: with blocks of S*U rows indexed by antenna pair, the
        // sub-blocks along the time window depend only on s + r.
        let st = build_stacked(&clean, ModelKind::DodDoa, r, t).unwrap();
        let (s, u) = (st.shape.s, st.shape.u);
        for row in 0..st.matrix.nrows() {
            let (si, ui) = ((row / u) % s, row % u);
            for col in 0..st.matrix.ncols() {
                let (tc, rc) = (col / r, col % r);
                if si + 1 < s && rc > 0 {
                    let shifted = row + u;
                    prop_assert_eq!(st.matrix[(row, col)], st.matrix[(shifted, col - 1)]);
                }
                if ui + 1 < u && tc > 0 {
                    prop_assert_eq!(st.matrix[(row, col)], st.matrix[(row + 1, col - r)]);
                }
            }
        }
    }

    #[test]
    fn split_is_an_ordered_unitary_decomposition(seed: u64, n in 2usize..10, m in 1usize..12, zf in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = cmat(&mut rng, n, m);
        let c = &x * x.adjoint();
        let z = 1 + ((n - 1) as f64 * zf) as usize % (n - 1);
        let sp = split(&c, z).unwrap();
        prop_assert_eq!(sp.signal_basis.ncols() + sp.noise_basis.ncols(), n);
        let min_s = sp.signal_eigvals.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_n = sp.noise_eigvals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_s >= max_n);
        let e = ComplexMatrix::from_columns(&sp.signal_basis.column_iter().chain(sp.noise_basis.column_iter()).map(|c| c.into_owned()).collect::<Vec<_>>());
        prop_assert!((e.adjoint() * &e - ComplexMatrix::identity(n, n)).norm() <= 1e-8);
        let lam = |v: &[f64]| ComplexMatrix::from_diagonal(&DVector::from_iterator(v.len(), v.iter().map(|x| C64::new(*x, 0.0))));
        let rebuilt = &sp.signal_basis * lam(&sp.signal_eigvals) * sp.signal_basis.adjoint()
            + &sp.noise_basis * lam(&sp.noise_eigvals) * sp.noise_basis.adjoint();
        prop_assert!((rebuilt - &c).norm() <= 1e-9 * c.norm().max(1.0));
    }

    #[test]
    fn clean_fit_recovers_paired_parameters_and_predicts(seed: u64, z in 1usize..4, q in 10usize..16, k in 10usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = grid(2, 2, q, k);
        let ps = paths(z, &mut rng);
        let truth = ps.normalized(&cfg);
        let clean = sample_grid(&ps, &cfg);
        let opts = FitOptions { z_override: Some(z), sigma_reg: 0.0, ..FitOptions::default() };
        for model in ModelKind::ALL {
            let est = fit(&clean, model, &opts).unwrap();
            let dims = model_dims(model);
            let assignment = match_structural(&truth, &est.structural, dims);
            for (ti, a) in assignment.iter().enumerate() {
                let ei = a.expect("counts agree");
                for d in dims {
                    let want = match d {
                        chanpred::esprit::DimName::Rx => truth[ti].mu_r,
                        chanpred::esprit::DimName::Tx => truth[ti].mu_t,
                        chanpred::esprit::DimName::Time => truth[ti].gamma,
                        chanpred::esprit::DimName::Freq => truth[ti].eta,
                    };
                    prop_assert!(angular_distance(est.structural.get(*d, ei).unwrap(), want) <= 1e-6, "{model} {d:?}");
                }
            }
            let h = (q + 7) as i64;
            let pred = predict(&est, &PredictionRequest::at_time(h, k), &cfg);
            for kk in 0..k {
                let want = channel_response(&ps, &cfg, h, kk as i64);
                prop_assert!(rel(&pred.samples[kk], &want) <= 1e-6, "{model}");
            }
        }
    }

    #[test]
    fn prediction_ignores_path_order(seed: u64, z in 2usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = grid(2, 2, 10, 10);
        let clean = sample_grid(&paths(z, &mut rng), &cfg);
        let est = fit(&clean, ModelKind::DodDoa, &FitOptions { z_override: Some(z), ..FitOptions::default() }).unwrap();
        let mut rev = est.clone();
        let flip = |v: &mut Vec<f64>| v.reverse();
        rev.structural.mu_r.as_mut().map(flip);
        rev.structural.mu_t.as_mut().map(flip);
        rev.structural.gamma.reverse();
        rev.structural.eta.reverse();
        match &mut rev.amplitudes {
            chanpred::amplitude::AmplitudeEstimate::Beta(b) => b.reverse(),
            _ => unreachable!(),
        }
        let req = PredictionRequest { q_indices: vec![0, 5, 17], k_indices: vec![0, 3, 9] };
        let (a, b) = (predict(&est, &req, &cfg), predict(&rev, &req, &cfg));
        for (x, y) in a.samples.iter().zip(&b.samples) {
            prop_assert!(rel(x, y) <= 1e-12);
        }
    }

    #[test]
    fn fim_is_block_diagonal_and_scales_with_noise(seed: u64, z in 1usize..4, sigma in 1e-3f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = grid(2, 2, 6, 6);
        let ps = paths(z, &mut rng);
        let a = build_fim(&ps, &cfg, sigma).unwrap();
        let b = build_fim(&ps, &cfg, 10.0 * sigma).unwrap();
        prop_assert_eq!(a.param_order.clone(), param_order(z));
        for i in 1..a.fim.nrows() {
            prop_assert_eq!(a.fim[(0, i)], 0.0);
            prop_assert_eq!(a.fim[(i, 0)], 0.0);
        }
        for (x, y) in a.crb_diag.iter().zip(&b.crb_diag).skip(1) {
            if x.is_finite() {
                prop_assert!((y / x - 10.0).abs() <= 1e-10 * 10.0);
            } else {
                prop_assert!(y.is_infinite());
            }
        }
    }

    #[test]
    fn matching_recovers_permutations(seed: u64, z in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<Vec<f64>> = (0..z).map(|i| vec![-2.5 + 0.8 * i as f64, rng.random_range(-PI..PI)]).collect();
        let mut perm: Vec<usize> = (0..z).collect();
        for i in (1..z).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let est: Vec<Vec<f64>> = perm.iter().map(|&p| truth[p].iter().map(|v| v + rng.random_range(-0.1..0.1)).collect()).collect();
        let got = match_paths(&truth, &est);
        for (ti, a) in got.iter().enumerate() {
            prop_assert_eq!(perm[a.unwrap()], ti);
        }
    }

    #[test]
    fn cdf_is_a_monotone_step_to_one(values in prop::collection::vec(-50.0f64..10.0, 1..40)) {
        let cdf = empirical_cdf(&values);
        prop_assert_eq!(cdf.first().unwrap().1, 0.0);
        prop_assert_eq!(cdf.last().unwrap().1, 1.0);
        for w in cdf.windows(2) {
            prop_assert!(w[0].0 <= w[1].0 && w[0].1 <= w[1].1);
        }
    }
}

#[test]
fn noise_variance_estimate_is_close_at_moderate_snr() {
    use chanpred::channel::{add_noise, scenario_one_paths};
    use chanpred::subspace::{signal_subspace, OrderChoice};
    let cfg = ChannelConfig::default();
    let clean = sample_grid(&scenario_one_paths(), &cfg);
    let mut ratio = 0.0;
    let trials = 100;
    for trial in 0..trials {
        let noisy = add_noise(&clean, 10.0, 500 + trial).unwrap();
        let st = build_stacked(&noisy, ModelKind::DodDoa, 10, 8).unwrap();
        let sub = signal_subspace(&st, OrderChoice::Fixed(6)).unwrap();
        ratio += sub.noise_var_hat / noisy.noise_var;
    }
    ratio /= trials as f64;
    assert!((ratio - 1.0).abs() <= 0.2, "{ratio}");
}

#[test]
fn signal_subspace_spans_the_steering_matrix() {
    use chanpred::channel::scenario_one_paths;
    use chanpred::stacking::steering_matrix;
    use chanpred::subspace::{signal_subspace, OrderChoice};
    let cfg = grid(2, 2, 20, 16);
    let ps = scenario_one_paths();
    let clean = sample_grid(&ps, &cfg);
    for model in ModelKind::ALL {
        let st = build_stacked(&clean, model, 10, 8).unwrap();
        let sub = signal_subspace(&st, OrderChoice::Fixed(6)).unwrap();
        let a = steering_matrix(model, 2, 2, &st.shape, &ps.normalized(&cfg));
        let resid = &a - &sub.basis * (sub.basis.adjoint() * &a);
        assert!(resid.norm() / a.norm() <= 1e-6, "{model}: {}", resid.norm() / a.norm());
    }
}
