//! Probabilistic skip connections for frozen classifiers.
//!
//! Pick an intermediate layer whose features have not collapsed
//! ([`collapse`]), reduce its activations with a Tucker-factor projection
//! ([`projection`]), and fit distance-aware heads on the result ([`heads`]).
//! The host network is never retrained; everything works from activation dumps
//! ([`store`]).
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the default `f64` instantiation.

mod codec;
pub mod collapse;
pub mod error;
pub mod evaluation;
pub mod heads;
pub mod linalg;
pub mod projection;
pub mod scalar;
pub mod store;
pub mod toy;

pub use error::{PscError, Result};
pub use scalar::Scalar;

pub type CollapseReport = collapse::CollapseReport<f64>;
pub type LayerCollapse = collapse::LayerCollapse<f64>;
pub type ChannelMoments = projection::ChannelMoments<f64>;
pub type TuckerProjection = projection::TuckerProjection<f64>;
pub type FeatureBatch = projection::FeatureBatch<f64>;
pub type DimSelection = projection::DimSelection<f64>;
pub type GdaModel = heads::GdaModel<f64>;
pub type LaplaceLinearModel = heads::LaplaceLinearModel<f64>;
pub type UncertaintyOutput = heads::UncertaintyOutput<f64>;
