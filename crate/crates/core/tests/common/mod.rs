#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Gaussian blobs around random class centers; every class gets at least two samples.
pub fn blobs(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize, spread: f64) -> (Vec<f64>, Vec<usize>) {
    let centers: Vec<f64> = (0..classes * dim).map(|_| 3.0 * normal(rng)).collect();
    let mut labels: Vec<usize> = (0..n).map(|i| if i < 2 * classes { i % classes } else { rng.random_range(0..classes) }).collect();
    labels.sort_unstable();
    let values = labels
        .iter()
        .flat_map(|&y| (0..dim).map(move |j| (y, j)))
        .map(|(y, j)| centers[y * dim + j] + spread * normal(rng))
        .collect();
    (values, labels)
}

pub fn rows_matrix(rows: &[f64], dim: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows.len() / dim, dim, rows)
}

/// NC1 from explicit covariance matrices.
pub fn dense_nc1(rows: &[f64], dim: usize, labels: &[usize], classes: usize) -> f64 {
    let x = rows_matrix(rows, dim);
    let present: Vec<usize> = (0..classes).filter(|c| labels.contains(c)).collect();
    let mean_of = |c: usize| {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let mut m = DVector::zeros(dim);
        for &i in &idx {
            m += x.row(i).transpose();
        }
        m / idx.len() as f64
    };
    let means: Vec<DVector<f64>> = (0..classes).map(|c| if present.contains(&c) { mean_of(c) } else { DVector::zeros(dim) }).collect();
    let grand = present.iter().map(|&c| means[c].clone()).fold(DVector::zeros(dim), |a, b| a + b) / present.len() as f64;
    let mut sw = DMatrix::<f64>::zeros(dim, dim);
    let mut st = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..labels.len() {
        let xi = x.row(i).transpose();
        let dw = &xi - &means[labels[i]];
        let dt = &xi - &grand;
        sw += &dw * dw.transpose();
        st += &dt * dt.transpose();
    }
    let norm = (labels.len() * present.len()) as f64;
    (sw / norm).trace() / (st / norm).trace()
}

/// Nearest-centroid accuracy by comparing every eval point with every training
/// point's class centroid (recomputed per class from the raw rows).
pub fn pairwise_nc4(train: &[f64], train_labels: &[usize], eval: &[f64], eval_labels: &[usize], dim: usize, classes: usize) -> f64 {
    let mut centroid = vec![vec![0.0; dim]; classes];
    let mut count = vec![0usize; classes];
    for (i, &y) in train_labels.iter().enumerate() {
        count[y] += 1;
        for j in 0..dim {
            centroid[y][j] += train[i * dim + j];
        }
    }
    for c in 0..classes {
        for v in &mut centroid[c] {
            *v /= count[c].max(1) as f64;
        }
    }
    let mut hits = 0;
    for (i, &y) in eval_labels.iter().enumerate() {
        let x = &eval[i * dim..(i + 1) * dim];
        let dist = |c: usize| -> f64 { (0..dim).map(|j| (x[j] - centroid[c][j]).powi(2)).sum() };
        let mut best = None;
        for c in (0..classes).filter(|&c| count[c] > 0) {
            match best {
                Some(b) if dist(c) >= dist(b) => {}
                _ => best = Some(c),
            }
        }
        if best == Some(y) {
            hits += 1;
        }
    }
    hits as f64 / eval_labels.len() as f64
}

/// `ln Σ_c π_c N(z; μ_c, Σ_c)` with explicit inverse and determinant.
pub fn dense_mixture_log_density(priors: &[f64], means: &[DVector<f64>], covs: &[DMatrix<f64>], z: &DVector<f64>) -> f64 {
    let p = z.len() as f64;
    let terms: Vec<f64> = priors
        .iter()
        .zip(means.iter().zip(covs))
        .map(|(&pi, (mu, cov))| {
            let inv = cov.clone().try_inverse().expect("invertible covariance");
            let d = z - mu;
            let maha = (d.transpose() * inv * &d)[(0, 0)];
            pi.ln() - 0.5 * (p * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln() + maha)
        })
        .collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

pub fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| normal(rng));
    m.qr().q()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
