mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use psc_core::heads::{
    fit_gda, fit_laplace, objective_and_gradient, predict_probabilities, predictive_entropy, select_prior_precision,
    train_linear_map, GdaConfig, LaplaceConfig, LaplaceLinearModel,
};
use psc_core::projection::FeatureBatch;
use psc_core::scalar::log_sum_exp;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn features(rows: Vec<f64>, dim: usize, labels: Vec<usize>) -> FeatureBatch<f64> {
    FeatureBatch { start: 0, dim, values: rows, labels }
}

fn random_features(seed: u64, n: usize, dim: usize, classes: usize) -> FeatureBatch<f64> {
    let (rows, labels) = blobs(&mut rng(seed), n, dim, classes, 1.0);
    features(rows, dim, labels)
}

fn class_moments(f: &FeatureBatch<f64>, class: usize) -> (DVector<f64>, DMatrix<f64>) {
    let idx: Vec<usize> = (0..f.len()).filter(|&i| f.labels[i] == class).collect();
    let x = DMatrix::from_fn(idx.len(), f.dim, |i, j| f.row(idx[i])[j]);
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(idx.len(), f.dim, |i, j| x[(i, j)] - mean[j]);
    (mean, centered.transpose() * centered / (idx.len() - 1) as f64)
}

#[test]
fn gda_log_density_matches_dense_oracle() {
    for seed in 0..25 {
        let dim = 1 + seed as usize % 5;
        let classes = 1 + seed as usize % 3;
        let f = random_features(seed, 50, dim, classes);
        let model = fit_gda(&f, classes, &GdaConfig::default()).unwrap();
        assert!((model.priors.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut means = Vec::new();
        let mut covs = Vec::new();
        for c in 0..classes {
            let (m, s) = class_moments(&f, c);
            means.push(m);
            covs.push(s + DMatrix::identity(dim, dim) * model.jitter);
        }
        let mut r = rng(seed + 100);
        for _ in 0..10 {
            let z = DVector::from_fn(dim, |_, _| 3.0 * normal(&mut r));
            let want = dense_mixture_log_density(&model.priors, &means, &covs, &z);
            let got = model.log_density(z.as_slice()).unwrap();
            assert!(rel_close(got, want, 1e-10), "seed {seed}: {got} vs {want}");
        }
    }
}

#[test]
fn gda_is_affine_equivariant() {
    let f = random_features(7, 60, 3, 2);
    let mut r = rng(70);
    let m = DMatrix::from_fn(3, 3, |_, _| normal(&mut r)) + DMatrix::identity(3, 3) * 2.0;
    let b = DVector::from_fn(3, |_, _| normal(&mut r));
    let map = |x: &[f64]| (&m * DVector::from_column_slice(x) + &b).as_slice().to_vec();
    let moved = features((0..f.len()).flat_map(|i| map(f.row(i))).collect(), 3, f.labels.clone());
    let exact = GdaConfig { jitter_grid: vec![0.0], ..GdaConfig::default() };
    let g0 = fit_gda(&f, 2, &exact).unwrap();
    let g1 = fit_gda(&moved, 2, &exact).unwrap();
    let shift = -m.determinant().abs().ln();
    let tests: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| 2.0 * normal(&mut r)).collect()).collect();
    let d0: Vec<f64> = tests.iter().map(|z| g0.log_density(z).unwrap()).collect();
    let d1: Vec<f64> = tests.iter().map(|z| g1.log_density(&map(z)).unwrap()).collect();
    for (a, b) in d0.iter().zip(&d1) {
        assert!((b - a - shift).abs() < 1e-8, "{b} - {a} != {shift}");
    }
    let rank = |d: &[f64]| {
        let mut idx: Vec<usize> = (0..d.len()).collect();
        idx.sort_by(|&i, &j| d[i].partial_cmp(&d[j]).unwrap());
        idx
    };
    assert_eq!(rank(&d0), rank(&d1));
}

#[test]
fn one_dimensional_density_integrates_to_one() {
    let f = random_features(9, 40, 1, 1);
    let model = fit_gda(&f, 1, &GdaConfig::default()).unwrap();
    let mu = model.means[0];
    let sd = model.cholesky[0][(0, 0)];
    // composite Simpson over ±14 standard deviations
    let (lo, hi, n) = (mu - 14.0 * sd, mu + 14.0 * sd, 20_000);
    let h = (hi - lo) / n as f64;
    let pdf = |x: f64| model.log_density(&[x]).unwrap().exp();
    let mut total = pdf(lo) + pdf(hi);
    for i in 1..n {
        total += pdf(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    assert!((total * h / 3.0 - 1.0).abs() < 1e-6);
}

#[test]
fn log_sum_exp_shift_and_standard_normal_mode() {
    let terms = [-3.0, -1.0e6, 2.5, -7.25];
    for kappa in [-1.0e5, -3.5, 0.0, 17.0] {
        let shifted: Vec<f64> = terms.iter().map(|t| t + kappa).collect();
        assert!((log_sum_exp(&shifted) - log_sum_exp(&terms) - kappa).abs() <= 1e-9 * kappa.abs().max(1.0));
    }
    let f = features(vec![-1.0, 0.0, 1.0, 0.0, 0.0, -1.0, 0.0, 1.0], 2, vec![0; 4]);
    let model = fit_gda(&f, 1, &GdaConfig { jitter_grid: vec![1.0 / 3.0], ..GdaConfig::default() }).unwrap();
    // unbiased covariance is I·2/3, plus 1/3 jitter gives the identity
    assert!((model.log_density(&[0.0, 0.0]).unwrap() + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
}

fn weights(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    DMatrix::from_fn(rows, cols, |_, _| normal(&mut r))
}

#[test]
fn logistic_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let (dim, classes) = (1 + seed as usize % 4, 2 + seed as usize % 3);
        let f = random_features(seed, 30, dim, classes);
        let w = weights(classes, dim + 1, seed + 50) * 0.3;
        let tau = 0.7;
        let (_, g) = objective_and_gradient(&w, &f, tau);
        let h = 1e-5;
        for idx in 0..w.len() {
            let mut up = w.clone();
            up[idx] += h;
            let mut down = w.clone();
            down[idx] -= h;
            let fd = (objective_and_gradient(&up, &f, tau).0 - objective_and_gradient(&down, &f, tau).0) / (2.0 * h);
            assert!((fd - g[idx]).abs() <= 1e-4 * fd.abs().max(1e-2), "seed {seed}: {fd} vs {}", g[idx]);
        }
    }
}

#[test]
fn duplicated_data_with_doubled_prior_gives_same_map() {
    let f = random_features(21, 40, 3, 3);
    let mut doubled = f.clone();
    doubled.values.extend(f.values.iter().copied());
    doubled.labels.extend(f.labels.iter().copied());
    let w1 = train_linear_map(&f, 3, &LaplaceConfig { prior_precision: 0.5, ..LaplaceConfig::default() }).unwrap();
    let w2 = train_linear_map(&doubled, 3, &LaplaceConfig { prior_precision: 1.0, ..LaplaceConfig::default() }).unwrap();
    assert!((w1 - w2).amax() < 1e-8);
}

#[test]
fn single_sample_kronecker_equals_exact_ggn() {
    for seed in 0..8 {
        let (dim, classes) = (1 + seed as usize % 3, 2 + seed as usize % 3);
        let z: Vec<f64> = (0..dim).map(|j| (j as f64 + 1.0) * 0.4 - 0.5).collect();
        let f = features(z, dim, vec![seed as usize % classes]);
        let w = weights(classes, dim + 1, seed);
        let model = fit_laplace(&f, &w, &LaplaceConfig::default()).unwrap();
        let kron = model.input_factor.kronecker(&model.output_factor);
        // for a linear softmax layer the exact Hessian of the loss is its GGN;
        // differentiate the analytic gradient (τ = 0) in column-major vec(W) order
        let size = w.len();
        let h = 1e-5;
        let mut hessian = DMatrix::<f64>::zeros(size, size);
        for col in 0..size {
            let (mut up, mut down) = (w.clone(), w.clone());
            up[col] += h;
            down[col] -= h;
            let gu = objective_and_gradient(&up, &f, 0.0).1;
            let gd = objective_and_gradient(&down, &f, 0.0).1;
            for row in 0..size {
                hessian[(row, col)] = (gu[row] - gd[row]) / (2.0 * h);
            }
        }
        assert!((kron - hessian).amax() < 1e-8, "seed {seed}");
    }
}

#[test]
fn posterior_precision_is_bounded_below_by_prior() {
    for seed in 0..6 {
        let f = random_features(seed, 25, 2, 3);
        let tau = [0.01, 1.0, 30.0][seed as usize % 3];
        let cfg = LaplaceConfig { prior_precision: tau, ..LaplaceConfig::default() };
        let w = train_linear_map(&f, 3, &cfg).unwrap();
        let model = fit_laplace(&f, &w, &cfg).unwrap();
        let eig = model.posterior_precision().symmetric_eigenvalues();
        assert!(eig.min() >= tau * (1.0 - 1e-9), "seed {seed}: {}", eig.min());
        let (a, g) = model.damped_eigenvalues();
        assert!(a.iter().chain(g).all(|&v| v > 0.0));
    }
}

fn model_with(tau: f64, mc: usize) -> (LaplaceLinearModel<f64>, FeatureBatch<f64>) {
    let f = random_features(31, 30, 2, 2);
    let cfg = LaplaceConfig { prior_precision: 1.0, mc_samples: mc, seed: 5, ..LaplaceConfig::default() };
    let w = train_linear_map(&f, 2, &cfg).unwrap();
    let fitted = fit_laplace(&f, &w, &cfg).unwrap();
    let model = LaplaceLinearModel::from_factors(
        fitted.weights.clone(),
        fitted.input_factor.clone(),
        fitted.output_factor.clone(),
        tau,
        fitted.samples,
        mc,
        5,
    )
    .unwrap();
    (model, f)
}

#[test]
fn vanishing_posterior_variance_recovers_map_softmax() {
    let (sharp, f) = model_with(1e16, 50);
    let (single, _) = model_with(1e300, 1);
    for i in 0..f.len() {
        let map = sharp.map_probabilities(f.row(i)).unwrap();
        let mc = sharp.predict(f.row(i), i as u64).unwrap();
        assert!(map.iter().zip(&mc).all(|(a, b)| (a - b).abs() < 1e-6));
        let one = single.predict(f.row(i), 0).unwrap();
        let map = single.map_probabilities(f.row(i)).unwrap();
        assert!(one.iter().zip(&map).all(|(a, b)| (a - b).abs() < 1e-14));
    }
}

#[test]
fn monte_carlo_agrees_across_seeds_and_with_weight_sampling() {
    let (model, _) = model_with(0.05, 10_000);
    let z = [0.8, -1.3];
    let a = predict_probabilities(&model, &z, 10_000, 1).unwrap();
    let b = predict_probabilities(&model, &z, 10_000, 2).unwrap();
    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);

    // spread of one draw, estimated from whole-matrix posterior samples
    let mut r = ChaCha8Rng::seed_from_u64(99);
    let draws: Vec<f64> = (0..4000)
        .map(|_| {
            let w = model.sample_weights(&mut r);
            let logits = &w * DVector::from_column_slice(&[z[0], z[1], 1.0]);
            1.0 / (1.0 + (logits[1] - logits[0]).exp())
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64).sqrt();
    let se = sd / 10_000f64.sqrt();
    assert!((a[0] - b[0]).abs() <= 3.0 * std::f64::consts::SQRT_2 * se, "{} vs {}", a[0], b[0]);
    let se_weights = sd / (draws.len() as f64).sqrt();
    assert!((a[0] - mean).abs() <= 3.0 * (se * se + se_weights * se_weights).sqrt());
}

#[test]
fn parallel_batch_prediction_equals_serial() {
    let (model, f) = model_with(1.0, 64);
    let batch = model.predict_batch(&f).unwrap();
    for (i, p) in batch.iter().enumerate() {
        assert_eq!(p, &model.predict(f.row(i), i as u64).unwrap());
    }
}

#[test]
fn prior_selection_returns_grid_value() {
    let train = random_features(41, 60, 2, 2);
    let val = random_features(42, 30, 2, 2);
    let grid = [0.01, 1.0, 100.0];
    let (tau, table) = select_prior_precision(&train, &val, 2, &grid, &LaplaceConfig { mc_samples: 20, ..Default::default() }).unwrap();
    assert!(grid.contains(&tau));
    assert_eq!(table.len(), 3);
    let best = table.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
    assert_eq!(table.iter().find(|t| t.0 == tau).unwrap().1, best);
}

#[test]
fn entropy_matches_compensated_oracle() {
    let mut r = rng(3);
    for _ in 0..200 {
        let k = 2 + (normal(&mut r).abs() * 3.0) as usize;
        let raw: Vec<f64> = (0..k).map(|_| normal(&mut r).exp()).collect();
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        // Kahan-summed oracle
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for &q in &p {
            let y = -q * q.ln() - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        let h = predictive_entropy(&p);
        assert!((h - sum).abs() < 1e-12);
        assert!(h >= 0.0 && h <= (k as f64).ln() + 1e-12);
    }
}

#[test]
fn laplace_requires_enough_samples() {
    let f = random_features(1, 2, 2, 2);
    assert!(train_linear_map(&f, 3, &LaplaceConfig::default()).is_err());
    assert!(train_linear_map(&f, 2, &LaplaceConfig { prior_precision: 0.0, ..Default::default() }).is_err());
}
