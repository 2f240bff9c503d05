use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PscError>;

#[derive(Debug, Error)]
pub enum PscError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("i/o error: {0}")]
    Stream(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate activations: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("optimizer did not converge after {iterations} iterations (gradient inf-norm {gradient_norm:e})")]
    NonConvergence { iterations: usize, gradient_norm: f64 },

    #[error("layer {layer_id}: {source}")]
    Layer {
        layer_id: u32,
        #[source]
        source: Box<PscError>,
    },
}

impl PscError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PscError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_layer(self, layer_id: u32) -> Self {
        PscError::Layer {
            layer_id,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad inputs (files, manifests, shapes, arguments)
    /// as opposed to failures during numerical computation.
    pub fn is_validation(&self) -> bool {
        match self {
            PscError::Io { .. }
            | PscError::Stream(_)
            | PscError::Format(_)
            | PscError::Manifest(_)
            | PscError::Shape(_)
            | PscError::InvalidInput(_) => true,
            PscError::Degenerate(_) | PscError::Numerical(_) | PscError::NonConvergence { .. } => false,
            PscError::Layer { source, .. } => source.is_validation(),
        }
    }
}
