//! Desk-scale sign task: a 2-D dataset whose label depends on one coordinate,
//! a small residual MLP trained from scratch, and activation dumps in the
//! store format.

mod data;
mod geometry;
mod mlp;
mod spectral;

use serde::{Deserialize, Serialize};

pub use data::{generate_sign_dataset, generate_sign_points, LabeledPoints, SignDatasetConfig};
pub use geometry::{geometry_report, GeometryReport, LayerGeometry};
pub use mlp::{
    dump_activations, forward_collect, train_mlp, DenseLayer, LayerActivations, Mlp, MlpSpec, TrainConfig, TrainReport,
};
pub use spectral::{spectral_norm_of, SPECTRAL_MAX_ITERATIONS, SPECTRAL_TOLERANCE};

/// JSON config of the toy run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub data: SignDatasetConfig,
    pub network: MlpSpec,
    pub training: TrainConfig,
}
