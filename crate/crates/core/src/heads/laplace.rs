use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::codec::{LeReader, LeWriter};
use crate::error::{PscError, Result};
use crate::linalg::{from_row_major, symmetric_eigen_sorted, to_row_major, SortedEigen};
use crate::projection::FeatureBatch;
use crate::scalar::{softmax_into, Scalar};

const MAGIC: &[u8; 4] = b"PSCL";
const VERSION: u32 = 1;

pub const DEFAULT_PRIOR_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceConfig {
    /// Prior precision `τ` of the isotropic Gaussian prior on the weights.
    pub prior_precision: f64,
    pub mc_samples: usize,
    pub seed: u64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
}

impl Default for LaplaceConfig {
    fn default() -> Self {
        Self {
            prior_precision: 1.0,
            mc_samples: 100,
            seed: 0,
            max_iterations: 500,
            gradient_tolerance: 1e-6,
        }
    }
}

fn check_features<T: Scalar>(features: &FeatureBatch<T>, class_count: usize) -> Result<()> {
    if features.dim == 0 || features.values.len() != features.dim * features.len() {
        return Err(PscError::Shape("feature batch has inconsistent length".into()));
    }
    if let Some(y) = features.labels.iter().find(|&&y| y >= class_count) {
        return Err(PscError::InvalidInput(format!("label {y} outside class count {class_count}")));
    }
    if let Some(pos) = features.values.iter().position(|v| !v.is_finite_value()) {
        return Err(PscError::InvalidInput(format!("non-finite feature in sample {}", pos / features.dim)));
    }
    Ok(())
}

/// `z` with a trailing bias entry of 1.
fn augmented<T: Scalar>(z: &[T]) -> DVector<T> {
    DVector::from_iterator(z.len() + 1, z.iter().copied().chain(std::iter::once(T::one())))
}

fn softmax_vec<T: Scalar>(logits: &DVector<T>) -> DVector<T> {
    let mut out = DVector::zeros(logits.len());
    softmax_into(logits.as_slice(), out.as_mut_slice());
    out
}

/// Penalized cross-entropy `Σ_i −ln softmax(W z̃_i)_{y_i} + (τ/2)‖W‖²_F` and its
/// gradient with respect to `W` (`class_count × (dim + 1)`, bias last).
pub fn objective_and_gradient<T: Scalar>(
    weights: &DMatrix<T>,
    features: &FeatureBatch<T>,
    prior_precision: T,
) -> (T, DMatrix<T>) {
    let mut loss = T::zero();
    let mut grad = weights * prior_precision;
    for i in 0..features.len() {
        let z = augmented(features.row(i));
        let logits = weights * &z;
        let mut p = softmax_vec(&logits);
        let y = features.labels[i];
        loss -= p[y].max(T::of(f64::MIN_POSITIVE)).ln();
        p[y] -= T::one();
        grad += &p * z.transpose();
    }
    loss += prior_precision * T::of(0.5) * weights.norm_squared();
    (loss, grad)
}

fn hessian<T: Scalar>(weights: &DMatrix<T>, features: &FeatureBatch<T>, prior_precision: T) -> DMatrix<T> {
    let (k, p1) = weights.shape();
    let size = k * p1;
    let mut h = DMatrix::<T>::zeros(size, size);
    for i in 0..features.len() {
        let z = augmented(features.row(i));
        let p = softmax_vec(&(weights * &z));
        let zz = &z * z.transpose();
        for a in 0..k {
            for b in a..k {
                let coef = if a == b { p[a] - p[a] * p[b] } else { -p[a] * p[b] };
                if coef == T::zero() {
                    continue;
                }
                for j in 0..p1 {
                    for l in 0..p1 {
                        let v = coef * zz[(j, l)];
                        h[(a * p1 + j, b * p1 + l)] += v;
                        if a != b {
                            h[(b * p1 + l, a * p1 + j)] += v;
                        }
                    }
                }
            }
        }
    }
    for d in 0..size {
        h[(d, d)] += prior_precision;
    }
    h
}

fn flatten<T: Scalar>(m: &DMatrix<T>) -> DVector<T> {
    DVector::from_vec(to_row_major(m))
}

fn unflatten<T: Scalar>(v: &DVector<T>, rows: usize, cols: usize) -> DMatrix<T> {
    from_row_major(rows, cols, v.as_slice())
}

/// MAP weights of the multinomial logistic head by damped Newton iterations
/// with backtracking. The objective is strictly convex for `τ > 0`.
pub fn train_linear_map<T: Scalar>(
    features: &FeatureBatch<T>,
    class_count: usize,
    config: &LaplaceConfig,
) -> Result<DMatrix<T>> {
    check_features(features, class_count)?;
    if !(config.prior_precision > 0.0) {
        return Err(PscError::InvalidInput("prior precision must be positive".into()));
    }
    if class_count < 2 {
        return Err(PscError::InvalidInput("a classification head needs at least 2 classes".into()));
    }
    if features.len() < class_count {
        return Err(PscError::InvalidInput(format!(
            "{} samples for {class_count} classes",
            features.len()
        )));
    }
    let tau = T::of(config.prior_precision);
    let tol = T::of(config.gradient_tolerance);
    let p1 = features.dim + 1;
    let mut w = DMatrix::<T>::zeros(class_count, p1);
    let (mut loss, mut grad) = objective_and_gradient(&w, features, tau);
    for _ in 0..config.max_iterations {
        if grad.amax() < tol {
            return Ok(w);
        }
        let h = hessian(&w, features, tau);
        let g = flatten(&grad);
        let step = match h.cholesky() {
            Some(chol) => chol.solve(&g),
            None => g.clone(),
        };
        let slope = -g.dot(&step);
        let mut t = T::one();
        let mut accepted = false;
        for _ in 0..60 {
            let candidate = &w - unflatten(&step, class_count, p1) * t;
            let (c_loss, c_grad) = objective_and_gradient(&candidate, features, tau);
            if c_loss <= loss + T::of(1e-4) * t * slope {
                w = candidate;
                loss = c_loss;
                grad = c_grad;
                accepted = true;
                break;
            }
            t *= T::of(0.5);
        }
        if !accepted {
            // no further decrease is representable; accept if already at tolerance
            break;
        }
    }
    let gradient_norm = grad.amax().to_f64_lossy();
    if grad.amax() < tol {
        Ok(w)
    } else {
        Err(PscError::NonConvergence {
            iterations: config.max_iterations,
            gradient_norm,
        })
    }
}

/// Fitted head: MAP weights plus Kronecker-factored posterior precision
/// `(√N·A + √τ·I) ⊗ (√N·G + √τ·I)` over the column-stacked weights.
#[derive(Debug, Clone)]
pub struct LaplaceLinearModel<T: Scalar> {
    /// `class_count × (dim + 1)`.
    pub weights: DMatrix<T>,
    /// Input second moment `(1/N) Σ z̃ z̃ᵀ`.
    pub input_factor: DMatrix<T>,
    /// Output curvature `(1/N) Σ (diag p − p pᵀ)`.
    pub output_factor: DMatrix<T>,
    pub prior_precision: T,
    pub samples: usize,
    pub mc_samples: usize,
    pub seed: u64,
    input_eigen: SortedEigen<T>,
    output_eigen: SortedEigen<T>,
}

impl<T: Scalar> PartialEq for LaplaceLinearModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights
            && self.input_factor == other.input_factor
            && self.output_factor == other.output_factor
            && self.prior_precision == other.prior_precision
            && self.samples == other.samples
            && self.mc_samples == other.mc_samples
            && self.seed == other.seed
    }
}

/// Kronecker factors at the MAP and their damped eigendecompositions.
pub fn fit_laplace<T: Scalar>(
    features: &FeatureBatch<T>,
    weights: &DMatrix<T>,
    config: &LaplaceConfig,
) -> Result<LaplaceLinearModel<T>> {
    let (k, p1) = weights.shape();
    check_features(features, k)?;
    if p1 != features.dim + 1 {
        return Err(PscError::Shape(format!(
            "weights have {} columns, features need {}",
            p1,
            features.dim + 1
        )));
    }
    let n = features.len();
    if n == 0 {
        return Err(PscError::InvalidInput("no samples".into()));
    }
    let mut a = DMatrix::<T>::zeros(p1, p1);
    let mut g = DMatrix::<T>::zeros(k, k);
    for i in 0..n {
        let z = augmented(features.row(i));
        let p = softmax_vec(&(weights * &z));
        a += &z * z.transpose();
        g += DMatrix::from_diagonal(&p) - &p * p.transpose();
    }
    let inv = T::one() / T::from_usize_lossy(n);
    LaplaceLinearModel::from_factors(
        weights.clone(),
        a * inv,
        g * inv,
        T::of(config.prior_precision),
        n,
        config.mc_samples,
        config.seed,
    )
}

impl<T: Scalar> LaplaceLinearModel<T> {
    pub fn from_factors(
        weights: DMatrix<T>,
        input_factor: DMatrix<T>,
        output_factor: DMatrix<T>,
        prior_precision: T,
        samples: usize,
        mc_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(prior_precision > T::zero()) {
            return Err(PscError::InvalidInput("prior precision must be positive".into()));
        }
        let root_n = T::from_usize_lossy(samples).sqrt();
        let root_tau = prior_precision.sqrt();
        let damp = |m: &DMatrix<T>| -> Result<SortedEigen<T>> {
            let mut d = m * root_n;
            for i in 0..d.nrows() {
                d[(i, i)] += root_tau;
            }
            let eig = symmetric_eigen_sorted(&d)?;
            if eig.values.iter().any(|&v| !(v > T::zero())) {
                return Err(PscError::Numerical("damped Kronecker factor is not positive definite".into()));
            }
            Ok(eig)
        };
        let input_eigen = damp(&input_factor)?;
        let output_eigen = damp(&output_factor)?;
        Ok(Self {
            weights,
            input_factor,
            output_factor,
            prior_precision,
            samples,
            mc_samples,
            seed,
            input_eigen,
            output_eigen,
        })
    }

    pub fn class_count(&self) -> usize {
        self.weights.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols() - 1
    }

    /// Eigenvalues of the damped input and output factors, descending.
    pub fn damped_eigenvalues(&self) -> (&[T], &[T]) {
        (&self.input_eigen.values, &self.output_eigen.values)
    }

    /// Dense posterior precision over column-major `vec(W)`.
    pub fn posterior_precision(&self) -> DMatrix<T> {
        let (root_n, root_tau) = (T::from_usize_lossy(self.samples).sqrt(), self.prior_precision.sqrt());
        let damp = |m: &DMatrix<T>| {
            let mut d = m * root_n;
            for i in 0..d.nrows() {
                d[(i, i)] += root_tau;
            }
            d
        };
        damp(&self.input_factor).kronecker(&damp(&self.output_factor))
    }

    /// `softmax(W_MAP z̃)`.
    pub fn map_probabilities(&self, z: &[T]) -> Result<Vec<T>> {
        self.check_input(z)?;
        Ok(softmax_vec(&(&self.weights * augmented(z))).as_slice().to_vec())
    }

    fn check_input(&self, z: &[T]) -> Result<()> {
        if z.len() != self.input_dim() {
            return Err(PscError::Shape(format!(
                "feature has {} entries, head expects {}",
                z.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Row factor `G'^{-1/2}` and column factor `A'^{-1/2}` of the matrix-normal posterior.
    fn root_covariances(&self) -> (DMatrix<T>, DMatrix<T>) {
        let root_inv = |e: &SortedEigen<T>| {
            let mut q = e.vectors.clone();
            for (j, &v) in e.values.iter().enumerate() {
                let s = T::one() / v.sqrt();
                q.column_mut(j).scale_mut(s);
            }
            q
        };
        (root_inv(&self.output_eigen), root_inv(&self.input_eigen))
    }

    /// One weight matrix from the matrix-normal posterior.
    pub fn sample_weights(&self, rng: &mut ChaCha8Rng) -> DMatrix<T> {
        let (row_root, col_root) = self.root_covariances();
        let (k, p1) = self.weights.shape();
        let noise = DMatrix::from_fn(k, p1, |_, _| T::of(StandardNormal.sample(rng)));
        &self.weights + row_root * noise * col_root.transpose()
    }

    /// Monte Carlo posterior predictive with `mc_samples` draws seeded by `seed`.
    ///
    /// Under the matrix-normal posterior the logits `W z̃` are Gaussian with
    /// mean `W_MAP z̃` and covariance `(z̃ᵀ A'^{-1} z̃) · G'^{-1}`, so draws are
    /// taken from that marginal directly; this has the same distribution as
    /// sampling whole weight matrices.
    pub fn predict_with(&self, z: &[T], mc_samples: usize, seed: u64) -> Result<Vec<T>> {
        self.check_input(z)?;
        if mc_samples == 0 {
            return Err(PscError::InvalidInput("at least one Monte Carlo sample is required".into()));
        }
        let zt = augmented(z);
        let mean = &self.weights * &zt;
        let (row_root, col_root) = self.root_covariances();
        let scale = (col_root.transpose() * &zt).norm();
        let k = self.class_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = vec![T::zero(); k];
        let mut probs = vec![T::zero(); k];
        for _ in 0..mc_samples {
            let eps = DVector::from_fn(k, |_, _| T::of(StandardNormal.sample(&mut rng)));
            let logits = &mean + &row_root * eps * scale;
            softmax_into(logits.as_slice(), &mut probs);
            for (a, &p) in acc.iter_mut().zip(&probs) {
                *a += p;
            }
        }
        let inv = T::one() / T::from_usize_lossy(mc_samples);
        acc.iter_mut().for_each(|a| *a *= inv);
        // renormalize away accumulated rounding
        let total: T = acc.iter().copied().sum();
        acc.iter_mut().for_each(|a| *a /= total);
        Ok(acc)
    }

    /// Prediction for the sample at `sample_index`, seeded with `seed ⊕ sample_index`.
    pub fn predict(&self, z: &[T], sample_index: u64) -> Result<Vec<T>> {
        self.predict_with(z, self.mc_samples, self.seed ^ sample_index)
    }

    /// Parallel batch prediction; identical to calling [`Self::predict`] per row.
    pub fn predict_batch(&self, features: &FeatureBatch<T>) -> Result<Vec<Vec<T>>> {
        (0..features.len())
            .into_par_iter()
            .map(|i| self.predict(features.row(i), (features.start + i) as u64))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| PscError::io(path, e))?;
        let mut w = LeWriter::new(BufWriter::new(file));
        let (k, p1) = self.weights.shape();
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        w.u64(k as u64)?;
        w.u64(p1 as u64)?;
        w.u64(self.samples as u64)?;
        w.f64(self.prior_precision.to_f64_lossy())?;
        w.u64(self.mc_samples as u64)?;
        w.u64(self.seed)?;
        w.scalars(&to_row_major(&self.weights))?;
        w.scalars(&to_row_major(&self.input_factor))?;
        w.scalars(&to_row_major(&self.output_factor))?;
        w.into_inner().flush().map_err(|e| PscError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| PscError::io(path, e))?;
        let mut r = LeReader::new(BufReader::new(file));
        r.expect_magic(MAGIC)?;
        r.expect_version(VERSION)?;
        let k = r.usize()?;
        let p1 = r.usize()?;
        if k < 2 || p1 < 2 {
            return Err(PscError::Format(format!("invalid Laplace dims {k}x{p1}")));
        }
        let samples = r.usize()?;
        let tau = T::of(r.f64()?);
        let mc_samples = r.usize()?;
        let seed = r.u64()?;
        let weights = from_row_major(k, p1, &r.scalars(k * p1)?);
        let input_factor = from_row_major(p1, p1, &r.scalars(p1 * p1)?);
        let output_factor = from_row_major(k, k, &r.scalars(k * k)?);
        r.expect_eof()?;
        Self::from_factors(weights, input_factor, output_factor, tau, samples, mc_samples, seed)
    }
}

pub fn predict_probabilities<T: Scalar>(
    model: &LaplaceLinearModel<T>,
    z: &[T],
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<T>> {
    model.predict_with(z, mc_samples, seed)
}

/// Chooses `τ` from `grid` by validation NLL of the posterior predictive.
/// Returns the chosen value and the NLL of every grid point.
pub fn select_prior_precision<T: Scalar>(
    train: &FeatureBatch<T>,
    val: &FeatureBatch<T>,
    class_count: usize,
    grid: &[f64],
    config: &LaplaceConfig,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(PscError::InvalidInput("empty prior-precision grid".into()));
    }
    let mut table = Vec::with_capacity(grid.len());
    for &tau in grid {
        let cfg = LaplaceConfig {
            prior_precision: tau,
            ..*config
        };
        let w = train_linear_map(train, class_count, &cfg)?;
        let model = fit_laplace(train, &w, &cfg)?;
        let probs = model.predict_batch(val)?;
        let nll = probs
            .iter()
            .zip(&val.labels)
            .map(|(p, &y)| -p[y].to_f64_lossy().max(1e-12).ln())
            .sum::<f64>()
            / val.len().max(1) as f64;
        table.push((tau, nll));
    }
    let best = table
        .iter()
        .copied()
        .fold(table[0], |b, e| if e.1 < b.1 { e } else { b });
    Ok((best.0, table))
}

#[cfg(test)]
pub(crate) fn map_accuracy<T: Scalar>(weights: &DMatrix<T>, features: &FeatureBatch<T>) -> f64 {
    let correct = (0..features.len())
        .filter(|&i| {
            let logits = weights * augmented(features.row(i));
            crate::scalar::argmax(logits.as_slice()) == features.labels[i]
        })
        .count();
    correct as f64 / features.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable() -> FeatureBatch<f64> {
        FeatureBatch {
            start: 0,
            dim: 1,
            values: vec![-2.0, -1.5, -1.0, -0.5, 0.5, 1.0, 1.5, 2.0],
            labels: vec![0, 0, 0, 0, 1, 1, 1, 1],
        }
    }

    #[test]
    fn separable_data_is_fit_perfectly() {
        let w = train_linear_map(&separable(), 2, &LaplaceConfig::default()).unwrap();
        assert_eq!(map_accuracy(&w, &separable()), 1.0);
        let (_, g) = objective_and_gradient(&w, &separable(), 1.0);
        assert!(g.amax() < 1e-6);
    }

    #[test]
    fn rejects_single_class() {
        let mut f = separable();
        f.labels = vec![0; 8];
        assert!(train_linear_map(&f, 1, &LaplaceConfig::default()).is_err());
    }

    #[test]
    fn output_factor_rows_sum_to_zero() {
        let f = separable();
        let w = train_linear_map(&f, 2, &LaplaceConfig::default()).unwrap();
        let m = fit_laplace(&f, &w, &LaplaceConfig::default()).unwrap();
        for r in 0..2 {
            assert!(m.output_factor.row(r).sum().abs() < 1e-10);
        }
    }

    #[test]
    fn predictions_are_seed_deterministic_and_normalized() {
        let f = separable();
        let cfg = LaplaceConfig::default();
        let w = train_linear_map(&f, 2, &cfg).unwrap();
        let m = fit_laplace(&f, &w, &cfg).unwrap();
        let a = m.predict(&[0.1], 3).unwrap();
        let b = m.predict(&[0.1], 3).unwrap();
        assert_eq!(a, b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(m.predict(&[0.1, 0.2], 3).is_err());
    }

    #[test]
    fn persistence_round_trip() {
        let f = separable();
        let cfg = LaplaceConfig {
            seed: 42,
            ..LaplaceConfig::default()
        };
        let w = train_linear_map(&f, 2, &cfg).unwrap();
        let m = fit_laplace(&f, &w, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.pscl");
        m.save(&path).unwrap();
        let back = LaplaceLinearModel::<f64>::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.predict(&[0.3], 1).unwrap(), m.predict(&[0.3], 1).unwrap());
    }
}
