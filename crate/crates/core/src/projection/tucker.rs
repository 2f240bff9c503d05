use log::warn;
use nalgebra::DMatrix;

use crate::error::{PscError, Result};
use crate::linalg::symmetric_eigen_sorted;
use crate::scalar::Scalar;

use super::moments::ChannelMoments;
use super::VARIANCE_FLOOR;

/// Symmetric `C × D × D` tensor, one `D × D` slice per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTensor<T: Scalar> {
    pub channels: usize,
    pub features: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> CorrelationTensor<T> {
    pub fn slice(&self, channel: usize) -> &[T] {
        let d2 = self.features * self.features;
        &self.data[channel * d2..(channel + 1) * d2]
    }

    fn slice_matrix(&self, channel: usize) -> DMatrix<T> {
        DMatrix::from_row_slice(self.features, self.features, self.slice(channel))
    }
}

/// Rescales each covariance slice to a correlation matrix. Coordinates with
/// variance at or below the floor are left unscaled.
pub fn covariance_to_correlation<T: Scalar>(moments: &ChannelMoments<T>) -> CorrelationTensor<T> {
    let d = moments.features;
    let floor = T::of(VARIANCE_FLOOR);
    let mut data = moments.cov.clone();
    for c in 0..moments.channels {
        let slice = &mut data[c * d * d..(c + 1) * d * d];
        let inv_std: Vec<T> = (0..d)
            .map(|j| {
                let v = slice[j * d + j];
                if v > floor {
                    T::one() / v.sqrt()
                } else {
                    T::one()
                }
            })
            .collect();
        for j in 0..d {
            for k in 0..d {
                slice[j * d + k] *= inv_std[j] * inv_std[k];
            }
        }
    }
    CorrelationTensor {
        channels: moments.channels,
        features: d,
        data,
    }
}

/// Channel factor `A` (`C × c_proj`) and shared feature factor `B` (`D × d_proj`).
#[derive(Debug, Clone, PartialEq)]
pub struct TuckerFactors<T: Scalar> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    /// All mode-1 singular values, descending.
    pub channel_singular_values: Vec<T>,
    /// All mode-2 (= mode-3) singular values, descending.
    pub feature_singular_values: Vec<T>,
}

impl<T: Scalar> TuckerFactors<T> {
    pub fn c_proj(&self) -> usize {
        self.a.ncols()
    }

    pub fn d_proj(&self) -> usize {
        self.b.ncols()
    }

    /// Leading columns of a wider fit. Columns are nested, so truncating a
    /// full-rank fit equals fitting at the smaller size directly.
    pub fn truncate(&self, c_proj: usize, d_proj: usize) -> Result<Self> {
        check_dims(self.a.nrows(), self.b.nrows(), c_proj, d_proj)?;
        if c_proj > self.c_proj() || d_proj > self.d_proj() {
            return Err(PscError::InvalidInput("cannot truncate to larger dimensions".into()));
        }
        Ok(Self {
            a: self.a.columns(0, c_proj).clone_owned(),
            b: self.b.columns(0, d_proj).clone_owned(),
            channel_singular_values: self.channel_singular_values.clone(),
            feature_singular_values: self.feature_singular_values.clone(),
        })
    }

    /// Core tensor `𝒢 = T ×₁ Aᵀ ×₂ Bᵀ ×₃ Bᵀ` as `c_proj` slices of `d_proj × d_proj`.
    pub fn core(&self, tensor: &CorrelationTensor<T>) -> Vec<DMatrix<T>> {
        let reduced: Vec<DMatrix<T>> = (0..tensor.channels)
            .map(|c| self.b.transpose() * tensor.slice_matrix(c) * &self.b)
            .collect();
        (0..self.c_proj())
            .map(|k| {
                let mut g = DMatrix::zeros(self.d_proj(), self.d_proj());
                for (c, r) in reduced.iter().enumerate() {
                    g += r * self.a[(c, k)];
                }
                g
            })
            .collect()
    }

    /// `𝒢 ×₁ A ×₂ B ×₃ B`, flattened like the input tensor.
    pub fn reconstruct(&self, tensor: &CorrelationTensor<T>) -> Vec<T> {
        let core = self.core(tensor);
        let d = tensor.features;
        let mut out = Vec::with_capacity(tensor.data.len());
        for c in 0..tensor.channels {
            let mut mixed = DMatrix::zeros(self.d_proj(), self.d_proj());
            for (k, g) in core.iter().enumerate() {
                mixed += g * self.a[(c, k)];
            }
            let slice = &self.b * mixed * self.b.transpose();
            for j in 0..d {
                for k in 0..d {
                    out.push(slice[(j, k)]);
                }
            }
        }
        out
    }

    /// Frobenius norm of `T − reconstruct(T)`.
    pub fn reconstruction_error(&self, tensor: &CorrelationTensor<T>) -> T {
        self.reconstruct(tensor)
            .iter()
            .zip(&tensor.data)
            .map(|(&r, &t)| (r - t) * (r - t))
            .sum::<T>()
            .sqrt()
    }
}

fn check_dims(channels: usize, features: usize, c_proj: usize, d_proj: usize) -> Result<()> {
    if c_proj == 0 || c_proj > channels || d_proj == 0 || d_proj > features {
        return Err(PscError::InvalidInput(format!(
            "projection dims {c_proj}x{d_proj} outside 1..={channels} x 1..={features}"
        )));
    }
    Ok(())
}

/// Truncated HOSVD. `A` holds the top left singular vectors of the mode-1
/// unfolding (`C × D²`), `B` those of the mode-2 unfolding (`D × CD`); the
/// mode-3 factor equals `B` because every slice is symmetric. Singular vectors
/// come from the Gram matrices of the unfoldings.
pub fn fit_tucker<T: Scalar>(tensor: &CorrelationTensor<T>, c_proj: usize, d_proj: usize) -> Result<TuckerFactors<T>> {
    let (channels, d) = (tensor.channels, tensor.features);
    check_dims(channels, d, c_proj, d_proj)?;
    if tensor.data.len() != channels * d * d {
        return Err(PscError::Shape("correlation tensor has wrong length".into()));
    }

    let mut mode1 = DMatrix::<T>::zeros(channels, channels);
    for c in 0..channels {
        for c2 in c..channels {
            let v: T = tensor.slice(c).iter().zip(tensor.slice(c2)).map(|(&x, &y)| x * y).sum();
            mode1[(c, c2)] = v;
            mode1[(c2, c)] = v;
        }
    }
    let mut mode2 = DMatrix::<T>::zeros(d, d);
    for c in 0..channels {
        let s = tensor.slice_matrix(c);
        mode2 += &s * s.transpose();
    }

    let e1 = symmetric_eigen_sorted(&mode1)?;
    let e2 = symmetric_eigen_sorted(&mode2)?;
    let singular = |values: &[T]| -> Vec<T> { values.iter().map(|&v| v.max(T::zero()).sqrt()).collect() };
    let channel_singular_values = singular(&e1.values);
    let feature_singular_values = singular(&e2.values);

    warn_rank(&channel_singular_values, c_proj, "channel");
    warn_rank(&feature_singular_values, d_proj, "feature");

    Ok(TuckerFactors {
        a: e1.vectors.columns(0, c_proj).clone_owned(),
        b: e2.vectors.columns(0, d_proj).clone_owned(),
        channel_singular_values,
        feature_singular_values,
    })
}

fn warn_rank<T: Scalar>(singular: &[T], requested: usize, mode: &str) {
    let top = singular.first().copied().unwrap_or_else(T::zero);
    let rank = singular.iter().filter(|&&s| s > top * T::of(1e-10)).count();
    if rank < requested {
        warn!("{mode} mode has numerical rank {rank} < requested {requested}; padding with an orthonormal completion");
    }
}
