//! Reduction of candidate-layer activations to a low-dimensional feature vector.
//!
//! The pipeline is reshape → channelwise standardization → Tucker-factor
//! projection `Aᵀ X B` → optional output scaling. Factors come from a truncated
//! HOSVD of the channelwise correlation tensor (`C × D × D`); cross-channel
//! covariance is never formed.

mod dims;
mod moments;
mod pipeline;
mod reshape;
mod tucker;

pub use dims::{dim_grid, select_dims, DimSelection, DimSweepEntry, DEFAULT_DIM_TOLERANCE};
pub use moments::{compute_channel_moments, ChannelCovariancePass, ChannelMeanPass, ChannelMoments};
pub use pipeline::{process_pipeline, project, standardize, FeatureBatch, OutputScale, TuckerProjection};
pub use reshape::{reshape_concat, StackedBatch};
pub use tucker::{covariance_to_correlation, fit_tucker, CorrelationTensor, TuckerFactors};

/// Variances below this are treated as zero: such coordinates are centered but not scaled.
pub const VARIANCE_FLOOR: f64 = 1e-12;
