use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::codec::{LeReader, LeWriter};
use crate::error::{PscError, Result};
use crate::linalg::{from_row_major, to_row_major};
use crate::scalar::Scalar;
use crate::store::ActivationBatch;

use super::moments::ChannelMoments;
use super::reshape::{reshape_concat, StackedBatch};
use super::tucker::{covariance_to_correlation, fit_tucker, TuckerFactors};
use super::VARIANCE_FLOOR;

const MAGIC: &[u8; 4] = b"PSCP";
const VERSION: u32 = 1;

/// Projected feature vectors, `len() × dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch<T: Scalar> {
    pub start: usize,
    pub dim: usize,
    pub values: Vec<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> FeatureBatch<T> {
    pub fn empty(dim: usize) -> Self {
        Self {
            start: 0,
            dim,
            values: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn extend(&mut self, other: FeatureBatch<T>) -> Result<()> {
        if other.dim != self.dim {
            return Err(PscError::Shape(format!("feature dim {} vs {}", other.dim, self.dim)));
        }
        if self.is_empty() {
            self.start = other.start;
        }
        self.values.extend(other.values);
        self.labels.extend(other.labels);
        Ok(())
    }
}

/// Diagonal moments of the projected features, used by the optional final scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputScale<T: Scalar> {
    pub mean: Vec<T>,
    pub variance: Vec<T>,
}

impl<T: Scalar> OutputScale<T> {
    /// Population mean and variance of each feature.
    pub fn fit(features: &FeatureBatch<T>) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(PscError::InvalidInput("output scaling needs at least 2 samples".into()));
        }
        let inv = T::one() / T::from_usize_lossy(n);
        let mut mean = vec![T::zero(); features.dim];
        for i in 0..n {
            for (m, &z) in mean.iter_mut().zip(features.row(i)) {
                *m += z;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv);
        let mut variance = vec![T::zero(); features.dim];
        for i in 0..n {
            for ((v, &z), &m) in variance.iter_mut().zip(features.row(i)).zip(&mean) {
                *v += (z - m) * (z - m);
            }
        }
        variance.iter_mut().for_each(|v| *v *= inv);
        Ok(Self { mean, variance })
    }

    pub fn apply(&self, z: &mut [T]) {
        let floor = T::of(VARIANCE_FLOOR);
        for ((x, &m), &v) in z.iter_mut().zip(&self.mean).zip(&self.variance) {
            *x -= m;
            if v > floor {
                *x /= v.sqrt();
            }
        }
    }
}

/// Everything needed to map a raw candidate-layer sample to its feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TuckerProjection<T: Scalar> {
    pub channels: usize,
    pub features: usize,
    /// `C × D` channelwise means.
    pub mean: Vec<T>,
    /// `C × D` standard deviations (square roots of the covariance diagonals).
    pub std: Vec<T>,
    pub factors: TuckerFactors<T>,
    pub output_scale: Option<OutputScale<T>>,
}

impl<T: Scalar> TuckerProjection<T> {
    /// Correlation transform of `moments` followed by a truncated HOSVD.
    pub fn fit(moments: &ChannelMoments<T>, c_proj: usize, d_proj: usize) -> Result<Self> {
        let factors = fit_tucker(&covariance_to_correlation(moments), c_proj, d_proj)?;
        Ok(Self::from_parts(moments, factors))
    }

    pub fn from_parts(moments: &ChannelMoments<T>, factors: TuckerFactors<T>) -> Self {
        Self {
            channels: moments.channels,
            features: moments.features,
            mean: moments.mean.clone(),
            std: moments.variances().into_iter().map(|v| v.max(T::zero()).sqrt()).collect(),
            factors,
            output_scale: None,
        }
    }

    pub fn c_proj(&self) -> usize {
        self.factors.c_proj()
    }

    pub fn d_proj(&self) -> usize {
        self.factors.d_proj()
    }

    pub fn output_dim(&self) -> usize {
        self.c_proj() * self.d_proj()
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.features
    }

    /// Channelwise centering and diagonal scaling.
    pub fn standardize(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.input_len() {
            return Err(PscError::Shape(format!(
                "sample has {} values, projection expects {}x{}",
                x.len(),
                self.channels,
                self.features
            )));
        }
        let floor = T::of(VARIANCE_FLOOR);
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&v, &m), &s)| if s * s < floor { v - m } else { (v - m) / s })
            .collect())
    }

    /// `Aᵀ X B`, flattened row-major.
    pub fn project(&self, standardized: &[T]) -> Result<Vec<T>> {
        if standardized.len() != self.input_len() {
            return Err(PscError::Shape(format!(
                "sample has {} values, projection expects {}x{}",
                standardized.len(),
                self.channels,
                self.features
            )));
        }
        let x = from_row_major(self.channels, self.features, standardized);
        let reduced: DMatrix<T> = self.factors.a.transpose() * x * &self.factors.b;
        Ok(to_row_major(&reduced))
    }

    /// Full per-sample transform: standardize, project, optionally scale.
    pub fn transform(&self, x: &[T], scale_output: bool) -> Result<Vec<T>> {
        let mut z = self.project(&self.standardize(x)?)?;
        if scale_output {
            if let Some(scale) = &self.output_scale {
                scale.apply(&mut z);
            }
        }
        Ok(z)
    }

    pub fn transform_stacked(&self, batch: &StackedBatch<T>, scale_output: bool) -> Result<FeatureBatch<T>> {
        if batch.channels != self.channels || batch.features != self.features {
            return Err(PscError::Shape(format!(
                "candidate layer is {}x{}, projection was fitted on {}x{}",
                batch.channels, batch.features, self.channels, self.features
            )));
        }
        let mut values = Vec::with_capacity(batch.len() * self.output_dim());
        for i in 0..batch.len() {
            values.extend(self.transform(batch.sample(i), scale_output)?);
        }
        Ok(FeatureBatch {
            start: batch.start,
            dim: self.output_dim(),
            values,
            labels: batch.labels.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| PscError::io(path, e))?;
        let mut w = LeWriter::new(BufWriter::new(file));
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        for d in [self.channels, self.features, self.c_proj(), self.d_proj()] {
            w.u64(d as u64)?;
        }
        w.scalars(&self.mean)?;
        w.scalars(&self.std)?;
        w.scalars(&to_row_major(&self.factors.a))?;
        w.scalars(&to_row_major(&self.factors.b))?;
        match &self.output_scale {
            Some(s) => {
                w.u8(1)?;
                w.scalars(&s.mean)?;
                w.scalars(&s.variance)?;
            }
            None => w.u8(0)?,
        }
        for sv in [&self.factors.channel_singular_values, &self.factors.feature_singular_values] {
            w.u64(sv.len() as u64)?;
            w.scalars(sv)?;
        }
        w.into_inner().flush().map_err(|e| PscError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| PscError::io(path, e))?;
        let mut r = LeReader::new(BufReader::new(file));
        r.expect_magic(MAGIC)?;
        r.expect_version(VERSION)?;
        let (channels, features, c_proj, d_proj) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?);
        if c_proj == 0 || c_proj > channels || d_proj == 0 || d_proj > features {
            return Err(PscError::Format(format!(
                "invalid projection dims {c_proj}x{d_proj} for {channels}x{features}"
            )));
        }
        let mean = r.scalars(channels * features)?;
        let std = r.scalars(channels * features)?;
        let a = from_row_major(channels, c_proj, &r.scalars(channels * c_proj)?);
        let b = from_row_major(features, d_proj, &r.scalars(features * d_proj)?);
        let output_scale = match r.u8()? {
            0 => None,
            1 => {
                let p = c_proj * d_proj;
                Some(OutputScale {
                    mean: r.scalars(p)?,
                    variance: r.scalars(p)?,
                })
            }
            other => return Err(PscError::Format(format!("bad output-scale flag {other}"))),
        };
        let n1 = r.usize()?;
        let channel_singular_values = r.scalars(n1)?;
        let n2 = r.usize()?;
        let feature_singular_values = r.scalars(n2)?;
        r.expect_eof()?;
        Ok(Self {
            channels,
            features,
            mean,
            std,
            factors: TuckerFactors {
                a,
                b,
                channel_singular_values,
                feature_singular_values,
            },
            output_scale,
        })
    }
}

/// Channelwise standardization of one `C × D` sample against fitted moments.
pub fn standardize<T: Scalar>(x: &[T], moments: &ChannelMoments<T>) -> Result<Vec<T>> {
    if x.len() != moments.channels * moments.features {
        return Err(PscError::Shape(format!(
            "sample has {} values, moments are {}x{}",
            x.len(),
            moments.channels,
            moments.features
        )));
    }
    let floor = T::of(VARIANCE_FLOOR);
    Ok(x.iter()
        .zip(&moments.mean)
        .zip(moments.variances())
        .map(|((&v, &m), var)| if var < floor { v - m } else { (v - m) / var.sqrt() })
        .collect())
}

/// `Aᵀ X B` for a standardized sample.
pub fn project<T: Scalar>(standardized: &[T], projection: &TuckerProjection<T>) -> Result<Vec<T>> {
    projection.project(standardized)
}

/// Reshape → standardize → project → optional output scaling for one aligned
/// set of candidate-layer batches.
pub fn process_pipeline<T: Scalar>(
    layers: &[ActivationBatch],
    projection: &TuckerProjection<T>,
    scale_output: bool,
) -> Result<FeatureBatch<T>> {
    let stacked = reshape_concat::<T>(layers)?;
    projection.transform_stacked(&stacked, scale_output)
}
