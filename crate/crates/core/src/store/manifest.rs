use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::format::{write_layer_file, LayerHeader};
use crate::error::{PscError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Ood,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestLayer {
    /// Relative paths resolve against the manifest's directory.
    pub path: String,
    pub layer_id: u32,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub class_count: usize,
    pub name: String,
    pub layers: Vec<ManifestLayer>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PscError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| PscError::Manifest(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| PscError::Manifest(e.to_string()))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| PscError::io(path, e))
    }
}

/// Writes layer files into a directory and assembles the manifest describing them.
pub struct DatasetWriter {
    dir: PathBuf,
    prefix: String,
    manifest: DatasetManifest,
}

impl DatasetWriter {
    pub fn new(dir: impl Into<PathBuf>, name: &str, split: Split, class_count: usize) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| PscError::io(&dir, e))?;
        let prefix = format!("{name}_{}", serde_json::to_value(split).unwrap().as_str().unwrap_or("split"));
        Ok(Self {
            dir,
            prefix,
            manifest: DatasetManifest {
                split,
                class_count,
                name: name.to_string(),
                layers: Vec::new(),
            },
        })
    }

    pub fn add_layer(&mut self, header: &LayerHeader, values: &[f32], labels: &[usize]) -> Result<()> {
        if let Some(bad) = labels.iter().find(|&&l| l >= self.manifest.class_count) {
            return Err(PscError::InvalidInput(format!(
                "label {bad} outside class count {}",
                self.manifest.class_count
            )));
        }
        let file_name = format!("{}_layer{:03}.psca", self.prefix, header.layer_id);
        let sha256 = write_layer_file(&self.dir.join(&file_name), header, values, labels)?;
        self.manifest.layers.push(ManifestLayer {
            path: file_name,
            layer_id: header.layer_id,
            sha256,
        });
        Ok(())
    }

    /// Writes `<prefix>.json` and returns its path.
    pub fn finish(self) -> Result<PathBuf> {
        let path = self.dir.join(format!("{}.json", self.prefix));
        self.manifest.save(&path)?;
        Ok(path)
    }
}
