use crate::error::{PscError, Result};
use crate::scalar::Scalar;
use crate::store::{ActivationBatch, LayerKind};

/// Candidate-layer samples combined into `C × D` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedBatch<T: Scalar> {
    pub start: usize,
    pub channels: usize,
    pub features: usize,
    /// `len() × channels × features`, row-major.
    pub values: Vec<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> StackedBatch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.features
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let w = self.sample_len();
        &self.values[i * w..(i + 1) * w]
    }
}

/// Combines aligned batches of one or more candidate layers.
///
/// Conv layers `C × h_i × w_i` become `C × Σ h_i w_i` (each channel flattened
/// row-major, layers concatenated along the feature axis). Fully connected
/// layers are single-channel rows concatenated to `1 × Σ d_i`.
pub fn reshape_concat<T: Scalar>(layers: &[ActivationBatch]) -> Result<StackedBatch<T>> {
    let first = layers
        .first()
        .ok_or_else(|| PscError::InvalidInput("no candidate layers to combine".into()))?;
    let kind = first.shape.kind();
    for b in layers {
        if b.shape.kind() != kind {
            return Err(PscError::Shape("cannot mix conv and fc candidate layers".into()));
        }
        if b.shape.channels() != first.shape.channels() {
            return Err(PscError::Shape(format!(
                "conv channel mismatch: layer {} has {} channels, layer {} has {}",
                first.layer_id,
                first.shape.channels(),
                b.layer_id,
                b.shape.channels()
            )));
        }
        if b.start != first.start || b.labels != first.labels {
            return Err(PscError::Shape(format!(
                "batches of layers {} and {} are not aligned",
                first.layer_id, b.layer_id
            )));
        }
    }
    let channels = first.shape.channels();
    let features: usize = layers.iter().map(|b| b.shape.features_per_channel()).sum();
    let n = first.len();
    let mut values = Vec::with_capacity(n * channels * features);
    for i in 0..n {
        match kind {
            LayerKind::Conv => {
                for c in 0..channels {
                    for b in layers {
                        let per = b.shape.features_per_channel();
                        values.extend(b.sample(i)[c * per..(c + 1) * per].iter().map(|&v| T::of(v as f64)));
                    }
                }
            }
            LayerKind::Fc => {
                for b in layers {
                    values.extend(b.sample(i).iter().map(|&v| T::of(v as f64)));
                }
            }
        }
        let row = &values[values.len() - channels * features..];
        if row.iter().any(|v| !v.is_finite_value()) {
            return Err(PscError::InvalidInput(format!(
                "non-finite activation in sample {}",
                first.start + i
            )));
        }
    }
    Ok(StackedBatch {
        start: first.start,
        channels,
        features,
        values,
        labels: first.labels.clone(),
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::SampleShape;

    fn conv(layer_id: u32, c: usize, h: usize, w: usize, n: usize) -> ActivationBatch {
        let shape = SampleShape::Conv { channels: c, height: h, width: w };
        ActivationBatch {
            layer_id,
            shape,
            start: 0,
            values: (0..n * shape.len()).map(|v| v as f32).collect(),
            labels: vec![0; n],
        }
    }

    fn fc(layer_id: u32, d: usize, n: usize) -> ActivationBatch {
        ActivationBatch {
            layer_id,
            shape: SampleShape::Fc { features: d },
            start: 0,
            values: (0..n * d).map(|v| 100.0 * layer_id as f32 + v as f32).collect(),
            labels: vec![0; n],
        }
    }

    #[test]
    fn single_conv_layer_keeps_channel_order() {
        let s = reshape_concat::<f64>(&[conv(0, 2, 2, 2, 1)]).unwrap();
        assert_eq!((s.channels, s.features), (2, 4));
        assert_eq!(s.values, (0..8).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn two_conv_layers_concatenate_features() {
        let s = reshape_concat::<f64>(&[conv(0, 2, 2, 2, 1), conv(1, 2, 3, 3, 1)]).unwrap();
        assert_eq!((s.channels, s.features), (2, 13));
        // channel 1 = layer0 channel1 (4..8) then layer1 channel1 (9..18)
        let ch1: Vec<f64> = s.sample(0)[13..].to_vec();
        let expected: Vec<f64> = (4..8).chain(9..18).map(f64::from).collect();
        assert_eq!(ch1, expected);
    }

    #[test]
    fn fc_layers_form_one_channel() {
        let s = reshape_concat::<f64>(&[fc(0, 5, 2), fc(1, 3, 2)]).unwrap();
        assert_eq!((s.channels, s.features), (1, 8));
        assert_eq!(s.sample(1), &[5.0, 6.0, 7.0, 8.0, 9.0, 103.0, 104.0, 105.0]);
    }

    #[test]
    fn rejects_mixed_kinds_and_channel_mismatch() {
        assert!(reshape_concat::<f64>(&[conv(0, 2, 2, 2, 1), fc(1, 3, 1)]).is_err());
        assert!(reshape_concat::<f64>(&[conv(0, 2, 2, 2, 1), conv(1, 3, 2, 2, 1)]).is_err());
    }

    #[test]
    fn non_finite_reports_sample_index() {
        let mut b = fc(0, 2, 3);
        b.start = 10;
        b.values[5] = f32::NAN;
        let err = reshape_concat::<f64>(&[b]).unwrap_err();
        assert!(err.to_string().contains("sample 12"), "{err}");
    }
}
