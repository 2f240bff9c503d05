use crate::error::{PscError, Result};
use crate::scalar::Scalar;

use super::reshape::StackedBatch;

/// Per-channel mean (`C × D`) and covariance (`C × D × D`, population `1/N`).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMoments<T: Scalar> {
    pub channels: usize,
    pub features: usize,
    pub samples: usize,
    pub mean: Vec<T>,
    pub cov: Vec<T>,
}

impl<T: Scalar> ChannelMoments<T> {
    pub fn cov_slice(&self, channel: usize) -> &[T] {
        let d2 = self.features * self.features;
        &self.cov[channel * d2..(channel + 1) * d2]
    }

    /// Diagonal of every covariance slice, `C × D`.
    pub fn variances(&self) -> Vec<T> {
        let d = self.features;
        (0..self.channels)
            .flat_map(|c| (0..d).map(move |j| (c, j)))
            .map(|(c, j)| self.cov[c * d * d + j * d + j])
            .collect()
    }
}

fn check_layout<T: Scalar>(batch: &StackedBatch<T>, channels: usize, features: usize) -> Result<()> {
    if batch.channels != channels || batch.features != features {
        return Err(PscError::Shape(format!(
            "batch is {}x{}, expected {channels}x{features}",
            batch.channels, batch.features
        )));
    }
    if let Some(pos) = batch.values.iter().position(|v| !v.is_finite_value()) {
        return Err(PscError::InvalidInput(format!(
            "non-finite activation in sample {}",
            batch.start + pos / batch.sample_len()
        )));
    }
    Ok(())
}

/// First pass: exact mean over all samples.
#[derive(Debug, Clone)]
pub struct ChannelMeanPass<T: Scalar> {
    channels: usize,
    features: usize,
    sums: Vec<T>,
    samples: usize,
}

impl<T: Scalar> ChannelMeanPass<T> {
    pub fn new(channels: usize, features: usize) -> Self {
        Self {
            channels,
            features,
            sums: vec![T::zero(); channels * features],
            samples: 0,
        }
    }

    pub fn add(&mut self, batch: &StackedBatch<T>) -> Result<()> {
        check_layout(batch, self.channels, self.features)?;
        for i in 0..batch.len() {
            for (s, &x) in self.sums.iter_mut().zip(batch.sample(i)) {
                *s += x;
            }
        }
        self.samples += batch.len();
        Ok(())
    }

    pub fn finish(self) -> Result<ChannelCovariancePass<T>> {
        if self.samples < 2 {
            return Err(PscError::InvalidInput(format!(
                "channel moments need at least 2 samples, got {}",
                self.samples
            )));
        }
        let inv = T::one() / T::from_usize_lossy(self.samples);
        let mean = self.sums.into_iter().map(|s| s * inv).collect();
        let d = self.features;
        Ok(ChannelCovariancePass {
            channels: self.channels,
            features: d,
            expected: self.samples,
            mean,
            sums: vec![T::zero(); self.channels * d * d],
            samples: 0,
            centered: vec![T::zero(); d],
        })
    }
}

/// Second pass: deviations about the already-exact mean. No cross-channel terms.
#[derive(Debug, Clone)]
pub struct ChannelCovariancePass<T: Scalar> {
    channels: usize,
    features: usize,
    expected: usize,
    mean: Vec<T>,
    sums: Vec<T>,
    samples: usize,
    centered: Vec<T>,
}

impl<T: Scalar> ChannelCovariancePass<T> {
    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn add(&mut self, batch: &StackedBatch<T>) -> Result<()> {
        check_layout(batch, self.channels, self.features)?;
        let d = self.features;
        for i in 0..batch.len() {
            let x = batch.sample(i);
            for c in 0..self.channels {
                for j in 0..d {
                    self.centered[j] = x[c * d + j] - self.mean[c * d + j];
                }
                let slice = &mut self.sums[c * d * d..(c + 1) * d * d];
                for j in 0..d {
                    let dj = self.centered[j];
                    for k in j..d {
                        slice[j * d + k] += dj * self.centered[k];
                    }
                }
            }
        }
        self.samples += batch.len();
        Ok(())
    }

    pub fn finish(self) -> Result<ChannelMoments<T>> {
        if self.samples != self.expected {
            return Err(PscError::InvalidInput(format!(
                "second pass saw {} samples, first pass saw {}",
                self.samples, self.expected
            )));
        }
        let d = self.features;
        let inv = T::one() / T::from_usize_lossy(self.samples);
        let mut cov = self.sums;
        for c in 0..self.channels {
            let slice = &mut cov[c * d * d..(c + 1) * d * d];
            for j in 0..d {
                for k in j..d {
                    let v = slice[j * d + k] * inv;
                    slice[j * d + k] = v;
                    slice[k * d + j] = v;
                }
            }
        }
        Ok(ChannelMoments {
            channels: self.channels,
            features: d,
            samples: self.samples,
            mean: self.mean,
            cov,
        })
    }
}

/// Two-pass channelwise moments over a re-iterable batch source.
///
/// `source` is called once per pass and must yield the same samples in the
/// same order both times; the result does not depend on how they are batched.
pub fn compute_channel_moments<T, F, I>(mut source: F) -> Result<ChannelMoments<T>>
where
    T: Scalar,
    F: FnMut() -> Result<I>,
    I: Iterator<Item = Result<StackedBatch<T>>>,
{
    let mut mean_pass: Option<ChannelMeanPass<T>> = None;
    for batch in source()? {
        let batch = batch?;
        mean_pass
            .get_or_insert_with(|| ChannelMeanPass::new(batch.channels, batch.features))
            .add(&batch)?;
    }
    let mut cov_pass = mean_pass
        .ok_or_else(|| PscError::InvalidInput("channel moments need at least 2 samples, got 0".into()))?
        .finish()?;
    for batch in source()? {
        cov_pass.add(&batch?)?;
    }
    cov_pass.finish()
}
