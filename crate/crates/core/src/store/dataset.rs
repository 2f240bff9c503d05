use std::fs::File;
use std::io::{BufReader, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use super::format::{read_header_at, read_layer_file, sha256_file, LayerHeader, SampleShape};
use super::manifest::{DatasetManifest, Split};
use crate::error::{PscError, Result};

/// A contiguous run of samples from one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    pub layer_id: u32,
    pub shape: SampleShape,
    /// Index of the first sample within the split.
    pub start: usize,
    /// `len() × shape.len()` values, row-major per sample.
    pub values: Vec<f32>,
    pub labels: Vec<usize>,
}

impl ActivationBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let w = self.shape.len();
        &self.values[i * w..(i + 1) * w]
    }
}

#[derive(Debug, Clone)]
struct LayerEntry {
    path: PathBuf,
    header: LayerHeader,
}

/// A validated split: every layer file checked against the manifest.
#[derive(Debug, Clone)]
pub struct ActivationDataset {
    manifest: DatasetManifest,
    layers: Vec<LayerEntry>,
    labels: Vec<usize>,
}

impl ActivationDataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_manifest(manifest, base)
    }

    pub fn from_manifest(manifest: DatasetManifest, base_dir: &Path) -> Result<Self> {
        if manifest.layers.is_empty() {
            return Err(PscError::Manifest("manifest lists no layers".into()));
        }
        if manifest.class_count == 0 {
            return Err(PscError::Manifest("class_count must be positive".into()));
        }
        for pair in manifest.layers.windows(2) {
            if pair[1].layer_id <= pair[0].layer_id {
                return Err(PscError::Manifest(format!(
                    "non-monotone layer ids: {} followed by {}",
                    pair[0].layer_id, pair[1].layer_id
                )));
            }
        }

        let mut layers = Vec::with_capacity(manifest.layers.len());
        let mut labels: Option<Vec<usize>> = None;
        for entry in &manifest.layers {
            let path = base_dir.join(&entry.path);
            if !path.exists() {
                return Err(PscError::Manifest(format!("missing layer file {}", path.display())));
            }
            let digest = sha256_file(&path)?;
            if !digest.eq_ignore_ascii_case(&entry.sha256) {
                return Err(PscError::Manifest(format!(
                    "checksum mismatch for {}: manifest {}, file {digest}",
                    path.display(),
                    entry.sha256
                )));
            }
            let header = read_header_at(&path)?;
            if header.layer_id != entry.layer_id {
                return Err(PscError::Manifest(format!(
                    "{} declares layer_id {}, manifest says {}",
                    path.display(),
                    header.layer_id,
                    entry.layer_id
                )));
            }
            let layer_labels = read_labels(&path, &header)?;
            match &labels {
                None => {
                    if let Some(bad) = layer_labels.iter().find(|&&l| l >= manifest.class_count) {
                        return Err(PscError::Manifest(format!(
                            "label {bad} outside class count {}",
                            manifest.class_count
                        )));
                    }
                    labels = Some(layer_labels);
                }
                Some(first) => {
                    if first.len() != layer_labels.len() {
                        return Err(PscError::Manifest(format!(
                            "inconsistent sample count: layer {} has {} samples, expected {}",
                            entry.layer_id,
                            layer_labels.len(),
                            first.len()
                        )));
                    }
                    if *first != layer_labels {
                        return Err(PscError::Manifest(format!(
                            "label sequence of layer {} differs from first layer",
                            entry.layer_id
                        )));
                    }
                }
            }
            layers.push(LayerEntry { path, header });
        }

        Ok(Self {
            manifest,
            layers,
            labels: labels.unwrap_or_default(),
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn split(&self) -> Split {
        self.manifest.split
    }

    pub fn name(&self) -> &str {
        &self.manifest.name
    }

    pub fn class_count(&self) -> usize {
        self.manifest.class_count
    }

    pub fn samples(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn layer_ids(&self) -> Vec<u32> {
        self.layers.iter().map(|l| l.header.layer_id).collect()
    }

    pub fn layer_header(&self, layer_id: u32) -> Result<&LayerHeader> {
        self.entry(layer_id).map(|e| &e.header)
    }

    fn entry(&self, layer_id: u32) -> Result<&LayerEntry> {
        self.layers
            .iter()
            .find(|l| l.header.layer_id == layer_id)
            .ok_or_else(|| PscError::InvalidInput(format!("unknown layer_id {layer_id}")))
    }

    /// Streams the layer in stored order, `batch_size` samples at a time.
    pub fn batches(&self, layer_id: u32, batch_size: usize) -> Result<BatchReader<'_>> {
        if batch_size == 0 {
            return Err(PscError::InvalidInput("batch_size must be at least 1".into()));
        }
        let entry = self.entry(layer_id)?;
        let mut file = BufReader::new(File::open(&entry.path).map_err(|e| PscError::io(&entry.path, e))?);
        file.seek(SeekFrom::Start(entry.header.payload_offset()))?;
        Ok(BatchReader {
            file,
            header: entry.header,
            labels: &self.labels,
            next: 0,
            batch_size,
        })
    }

    /// Reads a whole layer as a single batch.
    pub fn read_layer(&self, layer_id: u32) -> Result<ActivationBatch> {
        let entry = self.entry(layer_id)?;
        let (header, values, _) = read_layer_file(&entry.path)?;
        Ok(ActivationBatch {
            layer_id,
            shape: header.shape.sample,
            start: 0,
            values,
            labels: self.labels.clone(),
        })
    }
}

fn read_labels(path: &Path, header: &LayerHeader) -> Result<Vec<usize>> {
    let mut file = BufReader::new(File::open(path).map_err(|e| PscError::io(path, e))?);
    file.seek(SeekFrom::Start(header.label_offset()))?;
    let mut raw = vec![0u8; 2 * header.samples()];
    file.read_exact(&mut raw).map_err(|e| PscError::io(path, e))?;
    Ok(raw
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect())
}

/// Sequential batch stream over one layer file.
pub struct BatchReader<'a> {
    file: BufReader<File>,
    header: LayerHeader,
    labels: &'a [usize],
    next: usize,
    batch_size: usize,
}

impl Iterator for BatchReader<'_> {
    type Item = Result<ActivationBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        let total = self.header.samples();
        if self.next >= total {
            return None;
        }
        let start = self.next;
        let count = self.batch_size.min(total - start);
        let width = self.header.shape.sample.len();
        let mut raw = vec![0u8; 4 * count * width];
        if let Err(e) = self.file.read_exact(&mut raw) {
            self.next = total;
            return Some(Err(PscError::Format(format!("truncated payload: {e}"))));
        }
        self.next += count;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Some(Ok(ActivationBatch {
            layer_id: self.header.layer_id,
            shape: self.header.shape.sample,
            start,
            values,
            labels: self.labels[start..start + count].to_vec(),
        }))
    }
}
