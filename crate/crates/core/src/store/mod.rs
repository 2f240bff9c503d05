//! On-disk activation dumps and batched access to them.
//!
//! Every layer lives in its own self-describing `PSCA` file; a JSON manifest
//! ties the layer files of one split together and records their checksums.

mod dataset;
mod format;
mod manifest;

pub use dataset::{ActivationBatch, ActivationDataset, BatchReader};
pub use format::{
    encode_layer, read_layer_file, sha256_file, write_layer_file, LayerHeader, LayerKind, LayerShape,
    SampleShape, FORMAT_VERSION, MAGIC,
};
pub use manifest::{DatasetManifest, DatasetWriter, ManifestLayer, Split};
