use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;

use crate::codec::{LeReader, LeWriter};
use crate::error::{PscError, Result};
use crate::linalg::{cholesky_lower, forward_substitute, from_row_major, symmetric_eigen_sorted, to_row_major};
use crate::projection::FeatureBatch;
use crate::scalar::{log_sum_exp, Scalar};

const MAGIC: &[u8; 4] = b"PSCG";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct GdaConfig {
    /// Candidate diagonal jitters `λ`; selected by held-out log-density.
    pub jitter_grid: Vec<f64>,
    /// Fraction of training samples held out while selecting `λ`.
    pub holdout_fraction: f64,
    /// Optional PCA reduction applied before the density fit.
    pub pca_dim: Option<usize>,
}

impl Default for GdaConfig {
    fn default() -> Self {
        Self {
            jitter_grid: (1..=9).rev().map(|k| 10f64.powi(-k)).collect(),
            holdout_fraction: 0.2,
            pca_dim: None,
        }
    }
}

/// Mean-centering plus projection onto leading principal axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca<T: Scalar> {
    pub mean: Vec<T>,
    /// `input_dim × output_dim`, orthonormal columns.
    pub components: DMatrix<T>,
}

impl<T: Scalar> Pca<T> {
    pub fn fit(features: &FeatureBatch<T>, output_dim: usize) -> Result<Self> {
        let p = features.dim;
        if output_dim == 0 || output_dim > p {
            return Err(PscError::InvalidInput(format!("PCA dim {output_dim} outside 1..={p}")));
        }
        let n = features.len();
        if n < 2 {
            return Err(PscError::InvalidInput("PCA needs at least 2 samples".into()));
        }
        let mut mean = vec![T::zero(); p];
        for i in 0..n {
            for (m, &z) in mean.iter_mut().zip(features.row(i)) {
                *m += z;
            }
        }
        let inv = T::one() / T::from_usize_lossy(n);
        mean.iter_mut().for_each(|m| *m *= inv);
        let mut cov = DMatrix::<T>::zeros(p, p);
        let mut centered = vec![T::zero(); p];
        for i in 0..n {
            for ((c, &z), &m) in centered.iter_mut().zip(features.row(i)).zip(&mean) {
                *c = z - m;
            }
            for j in 0..p {
                for k in 0..p {
                    cov[(j, k)] += centered[j] * centered[k];
                }
            }
        }
        let eig = symmetric_eigen_sorted(&(cov * inv))?;
        Ok(Self {
            mean,
            components: eig.vectors.columns(0, output_dim).clone_owned(),
        })
    }

    pub fn output_dim(&self) -> usize {
        self.components.ncols()
    }

    pub fn apply(&self, z: &[T]) -> Vec<T> {
        (0..self.output_dim())
            .map(|k| {
                z.iter()
                    .zip(&self.mean)
                    .enumerate()
                    .map(|(j, (&v, &m))| (v - m) * self.components[(j, k)])
                    .sum()
            })
            .collect()
    }
}

/// Class-conditional Gaussians with full covariances, mixed by class frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct GdaModel<T: Scalar> {
    /// Dimension of the incoming feature vectors (before any PCA).
    pub input_dim: usize,
    /// Dimension the Gaussians live in.
    pub dim: usize,
    pub priors: Vec<T>,
    /// `class_count × dim`.
    pub means: Vec<T>,
    /// Lower Cholesky factors of `Σ_c + λI`.
    pub cholesky: Vec<DMatrix<T>>,
    pub jitter: T,
    pub pca: Option<Pca<T>>,
    log_dets: Vec<T>,
}

struct ClassMoments<T: Scalar> {
    counts: Vec<usize>,
    means: Vec<T>,
    covs: Vec<DMatrix<T>>,
}

fn class_moments<T: Scalar>(rows: &[T], dim: usize, labels: &[usize], class_count: usize) -> Result<ClassMoments<T>> {
    let mut counts = vec![0usize; class_count];
    let mut means = vec![T::zero(); class_count * dim];
    for (row, &y) in rows.chunks_exact(dim).zip(labels) {
        if y >= class_count {
            return Err(PscError::InvalidInput(format!("label {y} outside class count {class_count}")));
        }
        counts[y] += 1;
        for (m, &v) in means[y * dim..(y + 1) * dim].iter_mut().zip(row) {
            *m += v;
        }
    }
    if let Some(c) = counts.iter().position(|&n| n < 2) {
        return Err(PscError::InvalidInput(format!(
            "class {c} has {} samples; GDA needs at least 2 per class",
            counts[c]
        )));
    }
    for (c, &n) in counts.iter().enumerate() {
        let inv = T::one() / T::from_usize_lossy(n);
        means[c * dim..(c + 1) * dim].iter_mut().for_each(|m| *m *= inv);
    }
    let mut covs = vec![DMatrix::<T>::zeros(dim, dim); class_count];
    let mut centered = vec![T::zero(); dim];
    for (row, &y) in rows.chunks_exact(dim).zip(labels) {
        for ((c, &v), &m) in centered.iter_mut().zip(row).zip(&means[y * dim..(y + 1) * dim]) {
            *c = v - m;
        }
        let cov = &mut covs[y];
        for j in 0..dim {
            for k in j..dim {
                cov[(j, k)] += centered[j] * centered[k];
            }
        }
    }
    for (cov, &n) in covs.iter_mut().zip(&counts) {
        let inv = T::one() / T::from_usize_lossy(n - 1);
        for j in 0..dim {
            for k in j..dim {
                let v = cov[(j, k)] * inv;
                cov[(j, k)] = v;
                cov[(k, j)] = v;
            }
        }
    }
    Ok(ClassMoments { counts, means, covs })
}

fn assemble<T: Scalar>(moments: &ClassMoments<T>, dim: usize, jitter: T) -> Option<(Vec<DMatrix<T>>, Vec<T>)> {
    let mut factors = Vec::with_capacity(moments.covs.len());
    let mut log_dets = Vec::with_capacity(moments.covs.len());
    for cov in &moments.covs {
        let mut m = cov.clone();
        for j in 0..dim {
            m[(j, j)] += jitter;
        }
        let l = cholesky_lower(&m)?;
        let log_det = l.diagonal().iter().map(|d| d.ln()).sum::<T>() * T::of(2.0);
        factors.push(l);
        log_dets.push(log_det);
    }
    Some((factors, log_dets))
}

fn build<T: Scalar>(moments: &ClassMoments<T>, dim: usize, jitter: T) -> Option<GdaModel<T>> {
    let (cholesky, log_dets) = assemble(moments, dim, jitter)?;
    let total: usize = moments.counts.iter().sum();
    Some(GdaModel {
        input_dim: dim,
        dim,
        priors: moments
            .counts
            .iter()
            .map(|&n| T::from_usize_lossy(n) / T::from_usize_lossy(total))
            .collect(),
        means: moments.means.clone(),
        cholesky,
        jitter,
        pca: None,
        log_dets,
    })
}

fn is_holdout(i: usize, fraction: f64) -> bool {
    ((i + 1) as f64 * fraction).floor() > (i as f64 * fraction).floor()
}

/// Fits per-class means and unbiased covariances, selecting the jitter `λ`
/// that maximizes held-out log-density, then refits on all samples.
pub fn fit_gda<T: Scalar>(features: &FeatureBatch<T>, class_count: usize, config: &GdaConfig) -> Result<GdaModel<T>> {
    if config.jitter_grid.is_empty() || config.jitter_grid.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(PscError::InvalidInput("jitter grid must hold finite non-negative values".into()));
    }
    let input_dim = features.dim;
    if let Some(pos) = features.values.iter().position(|v| !v.is_finite_value()) {
        return Err(PscError::InvalidInput(format!("non-finite feature in sample {}", pos / input_dim)));
    }
    let pca = config.pca_dim.map(|k| Pca::fit(features, k)).transpose()?;
    let (rows, dim): (Vec<T>, usize) = match &pca {
        Some(p) => (
            (0..features.len()).flat_map(|i| p.apply(features.row(i))).collect(),
            p.output_dim(),
        ),
        None => (features.values.clone(), input_dim),
    };
    let labels = &features.labels;
    let full = class_moments(&rows, dim, labels, class_count)?;

    let mut grid = config.jitter_grid.clone();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();

    let jitter = if grid.len() == 1 {
        grid[0]
    } else {
        select_jitter(&rows, dim, labels, class_count, &grid, config.holdout_fraction).unwrap_or_else(|| {
            warn!("held-out jitter selection not possible; using the smallest stable jitter");
            grid.iter()
                .copied()
                .find(|&l| assemble(&full, dim, T::of(l)).is_some())
                .unwrap_or(grid[grid.len() - 1])
        })
    };

    let mut model = build(&full, dim, T::of(jitter)).ok_or_else(|| {
        PscError::Numerical(format!("Cholesky failed for every jitter up to {}", grid[grid.len() - 1]))
    })?;
    model.input_dim = input_dim;
    model.pca = pca;
    Ok(model)
}

fn select_jitter<T: Scalar>(
    rows: &[T],
    dim: usize,
    labels: &[usize],
    class_count: usize,
    grid: &[f64],
    fraction: f64,
) -> Option<f64> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return None;
    }
    let (mut fit_rows, mut fit_labels, mut held_rows) = (Vec::new(), Vec::new(), Vec::new());
    for (i, (row, &y)) in rows.chunks_exact(dim).zip(labels).enumerate() {
        if is_holdout(i, fraction) {
            held_rows.extend_from_slice(row);
        } else {
            fit_rows.extend_from_slice(row);
            fit_labels.push(y);
        }
    }
    if held_rows.is_empty() {
        return None;
    }
    let moments = class_moments(&fit_rows, dim, &fit_labels, class_count).ok()?;
    let mut best: Option<(f64, T)> = None;
    for &lambda in grid {
        let Some(model) = build(&moments, dim, T::of(lambda)) else {
            continue;
        };
        let score: T = held_rows.chunks_exact(dim).map(|z| model.log_density_reduced(z)).sum();
        if !score.is_finite_value() {
            continue;
        }
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((lambda, score));
        }
    }
    best.map(|(l, _)| l)
}

impl<T: Scalar> GdaModel<T> {
    pub fn class_count(&self) -> usize {
        self.priors.len()
    }

    pub fn log_det(&self, class: usize) -> T {
        self.log_dets[class]
    }

    fn reduce(&self, z: &[T]) -> Result<Vec<T>> {
        if z.len() != self.input_dim {
            return Err(PscError::Shape(format!(
                "feature has {} entries, GDA expects {}",
                z.len(),
                self.input_dim
            )));
        }
        if z.iter().any(|v| !v.is_finite_value()) {
            return Err(PscError::InvalidInput("non-finite feature vector".into()));
        }
        Ok(match &self.pca {
            Some(p) => p.apply(z),
            None => z.to_vec(),
        })
    }

    fn class_terms_reduced(&self, z: &[T]) -> Vec<T> {
        let half = T::of(0.5);
        let log_2pi = T::of((2.0 * std::f64::consts::PI).ln());
        let dim = self.dim;
        let mut centered = vec![T::zero(); dim];
        let mut white = vec![T::zero(); dim];
        (0..self.class_count())
            .map(|c| {
                for ((d, &v), &m) in centered.iter_mut().zip(z).zip(&self.means[c * dim..(c + 1) * dim]) {
                    *d = v - m;
                }
                forward_substitute(&self.cholesky[c], &centered, &mut white);
                let maha: T = white.iter().map(|&w| w * w).sum();
                self.priors[c].ln() - half * (T::from_usize_lossy(dim) * log_2pi + self.log_dets[c] + maha)
            })
            .collect()
    }

    fn log_density_reduced(&self, z: &[T]) -> T {
        log_sum_exp(&self.class_terms_reduced(z))
    }

    /// `ln π_c + ln N(z; μ_c, Σ_c + λI)` for every class.
    pub fn class_log_terms(&self, z: &[T]) -> Result<Vec<T>> {
        Ok(self.class_terms_reduced(&self.reduce(z)?))
    }

    /// `ln Σ_c π_c N(z; μ_c, Σ_c + λI)`.
    pub fn log_density(&self, z: &[T]) -> Result<T> {
        Ok(log_sum_exp(&self.class_log_terms(z)?))
    }

    /// Posterior class probabilities `p(y = c | z)`.
    pub fn class_posterior(&self, z: &[T]) -> Result<Vec<T>> {
        let terms = self.class_log_terms(z)?;
        let total = log_sum_exp(&terms);
        Ok(terms.into_iter().map(|t| (t - total).exp()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| PscError::io(path, e))?;
        let mut w = LeWriter::new(BufWriter::new(file));
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        w.u64(self.class_count() as u64)?;
        w.u64(self.input_dim as u64)?;
        w.u64(self.dim as u64)?;
        w.f64(self.jitter.to_f64_lossy())?;
        w.scalars(&self.priors)?;
        w.scalars(&self.means)?;
        for l in &self.cholesky {
            w.scalars(&to_row_major(l))?;
        }
        match &self.pca {
            Some(p) => {
                w.u8(1)?;
                w.scalars(&p.mean)?;
                w.scalars(&to_row_major(&p.components))?;
            }
            None => w.u8(0)?,
        }
        w.into_inner().flush().map_err(|e| PscError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| PscError::io(path, e))?;
        let mut r = LeReader::new(BufReader::new(file));
        r.expect_magic(MAGIC)?;
        r.expect_version(VERSION)?;
        let classes = r.usize()?;
        let input_dim = r.usize()?;
        let dim = r.usize()?;
        if classes == 0 || dim == 0 || dim > input_dim {
            return Err(PscError::Format(format!("invalid GDA dims: {classes} classes, {input_dim}->{dim}")));
        }
        let jitter = T::of(r.f64()?);
        let priors = r.scalars(classes)?;
        let means = r.scalars(classes * dim)?;
        let mut cholesky = Vec::with_capacity(classes);
        let mut log_dets = Vec::with_capacity(classes);
        for _ in 0..classes {
            let l: DMatrix<T> = from_row_major(dim, dim, &r.scalars(dim * dim)?);
            if l.diagonal().iter().any(|&d| d <= T::zero()) {
                return Err(PscError::Format("Cholesky factor with non-positive diagonal".into()));
            }
            log_dets.push(l.diagonal().iter().map(|d: &T| d.ln()).sum::<T>() * T::of(2.0));
            cholesky.push(l);
        }
        let pca = match r.u8()? {
            0 => None,
            1 => Some(Pca {
                mean: r.scalars(input_dim)?,
                components: from_row_major(input_dim, dim, &r.scalars(input_dim * dim)?),
            }),
            other => return Err(PscError::Format(format!("bad PCA flag {other}"))),
        };
        if pca.is_none() && dim != input_dim {
            return Err(PscError::Format("reduced dimension without a PCA block".into()));
        }
        r.expect_eof()?;
        Ok(Self {
            input_dim,
            dim,
            priors,
            means,
            cholesky,
            jitter,
            pca,
            log_dets,
        })
    }
}

/// Log feature density of `z` under a fitted model.
pub fn gda_log_density<T: Scalar>(model: &GdaModel<T>, z: &[T]) -> Result<T> {
    model.log_density(z)
}
