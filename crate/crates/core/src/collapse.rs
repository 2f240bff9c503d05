//! Layerwise neural-collapse metrics and candidate-layer selection.
//!
//! `NC1 = Tr(Σ_W) / Tr(Σ_T)` measures within-class variability relative to the
//! total variability around the grand mean, where the grand mean is the
//! unweighted average of the class means and both scatters use the same
//! `1/(N·C)` normalizer. `NC4` is the accuracy of a nearest-class-centroid
//! classifier. Traces are accumulated as sums of squared deviations, so no
//! `p × p` matrix is ever formed.

use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{PscError, Result};
use crate::scalar::Scalar;
use crate::store::{ActivationBatch, ActivationDataset, LayerKind};

pub const DEFAULT_EPSILON: f64 = 0.2;
pub const DEFAULT_NEAR_BAND: f64 = 0.05;

/// Running per-class sums for the first pass.
#[derive(Debug, Clone)]
pub struct ClassMeanAccumulator<T: Scalar> {
    dim: usize,
    sums: Vec<T>,
    counts: Vec<usize>,
}

impl<T: Scalar> ClassMeanAccumulator<T> {
    pub fn new(dim: usize, class_count: usize) -> Self {
        Self {
            dim,
            sums: vec![T::zero(); dim * class_count],
            counts: vec![0; class_count],
        }
    }

    pub fn add(&mut self, rows: &[T], labels: &[usize]) -> Result<()> {
        check_rows(rows, self.dim, labels)?;
        for (row, &label) in rows.chunks_exact(self.dim).zip(labels) {
            if label >= self.counts.len() {
                return Err(PscError::InvalidInput(format!(
                    "label {label} outside class count {}",
                    self.counts.len()
                )));
            }
            self.counts[label] += 1;
            let sum = &mut self.sums[label * self.dim..(label + 1) * self.dim];
            for (s, &x) in sum.iter_mut().zip(row) {
                *s += x;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<ClassMeans<T>> {
        let dim = self.dim;
        let present: Vec<usize> = (0..self.counts.len()).filter(|&c| self.counts[c] > 0).collect();
        if present.is_empty() {
            return Err(PscError::InvalidInput("no samples".into()));
        }
        for c in (0..self.counts.len()).filter(|&c| self.counts[c] == 0) {
            warn!("class {c} has no samples; excluded from the grand mean");
        }
        let mut means = self.sums;
        for (c, &count) in self.counts.iter().enumerate() {
            if count > 0 {
                let inv = T::one() / T::from_usize_lossy(count);
                for m in &mut means[c * dim..(c + 1) * dim] {
                    *m *= inv;
                }
            }
        }
        let mut grand_mean = vec![T::zero(); dim];
        for &c in &present {
            for (g, &m) in grand_mean.iter_mut().zip(&means[c * dim..(c + 1) * dim]) {
                *g += m;
            }
        }
        let inv = T::one() / T::from_usize_lossy(present.len());
        grand_mean.iter_mut().for_each(|g| *g *= inv);
        Ok(ClassMeans {
            dim,
            counts: self.counts,
            means,
            grand_mean,
        })
    }
}

/// Class centroids and the unweighted grand mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeans<T: Scalar> {
    pub dim: usize,
    pub counts: Vec<usize>,
    /// `class_count × dim`; rows of empty classes are zero.
    pub means: Vec<T>,
    pub grand_mean: Vec<T>,
}

impl<T: Scalar> ClassMeans<T> {
    pub fn from_rows(rows: &[T], dim: usize, labels: &[usize], class_count: usize) -> Result<Self> {
        let mut acc = ClassMeanAccumulator::new(dim, class_count);
        acc.add(rows, labels)?;
        acc.finish()
    }

    pub fn class_count(&self) -> usize {
        self.counts.len()
    }

    pub fn present_classes(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn mean(&self, class: usize) -> &[T] {
        &self.means[class * self.dim..(class + 1) * self.dim]
    }

    /// Nearest centroid by Euclidean distance, ties to the lowest class index.
    pub fn nearest(&self, x: &[T]) -> usize {
        let mut best = usize::MAX;
        let mut best_dist = T::zero();
        for c in (0..self.class_count()).filter(|&c| self.counts[c] > 0) {
            let d: T = self.mean(c).iter().zip(x).map(|(&m, &v)| (v - m) * (v - m)).sum();
            if best == usize::MAX || d < best_dist {
                best = c;
                best_dist = d;
            }
        }
        best
    }
}

/// Second pass: squared deviations from class means and from the grand mean.
#[derive(Debug, Clone)]
pub struct ScatterAccumulator<'a, T: Scalar> {
    means: &'a ClassMeans<T>,
    within: T,
    total: T,
    samples: usize,
}

impl<'a, T: Scalar> ScatterAccumulator<'a, T> {
    pub fn new(means: &'a ClassMeans<T>) -> Self {
        Self {
            means,
            within: T::zero(),
            total: T::zero(),
            samples: 0,
        }
    }

    pub fn add(&mut self, rows: &[T], labels: &[usize]) -> Result<()> {
        let dim = self.means.dim;
        check_rows(rows, dim, labels)?;
        for (row, &label) in rows.chunks_exact(dim).zip(labels) {
            if label >= self.means.class_count() || self.means.counts[label] == 0 {
                return Err(PscError::InvalidInput(format!("label {label} unseen in the mean pass")));
            }
            let mu = self.means.mean(label);
            for ((&x, &m), &g) in row.iter().zip(mu).zip(&self.means.grand_mean) {
                self.within += (x - m) * (x - m);
                self.total += (x - g) * (x - g);
            }
            self.samples += 1;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<ClassStatistics<T>> {
        if self.samples < 2 {
            return Err(PscError::InvalidInput(format!("NC1 needs at least 2 samples, got {}", self.samples)));
        }
        let norm = T::from_usize_lossy(self.samples) * T::from_usize_lossy(self.means.present_classes());
        Ok(ClassStatistics {
            means: self.means.clone(),
            within_trace: self.within / norm,
            total_trace: self.total / norm,
        })
    }
}

/// Class means plus the traces of the within-class and total scatter.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStatistics<T: Scalar> {
    pub means: ClassMeans<T>,
    pub within_trace: T,
    pub total_trace: T,
}

impl<T: Scalar> ClassStatistics<T> {
    pub fn from_rows(rows: &[T], dim: usize, labels: &[usize], class_count: usize) -> Result<Self> {
        let means = ClassMeans::from_rows(rows, dim, labels, class_count)?;
        let mut scatter = ScatterAccumulator::new(&means);
        scatter.add(rows, labels)?;
        scatter.finish()
    }

    pub fn nc1(&self) -> Result<T> {
        if self.total_trace <= T::zero() {
            return Err(PscError::Degenerate("total covariance trace is zero".into()));
        }
        Ok(self.within_trace / self.total_trace)
    }
}

fn check_rows<T: Scalar>(rows: &[T], dim: usize, labels: &[usize]) -> Result<()> {
    if dim == 0 || rows.len() != dim * labels.len() {
        return Err(PscError::Shape(format!(
            "{} values for {} samples of dimension {dim}",
            rows.len(),
            labels.len()
        )));
    }
    if let Some(pos) = rows.iter().position(|v| !v.is_finite_value()) {
        return Err(PscError::InvalidInput(format!("non-finite activation in sample {}", pos / dim)));
    }
    Ok(())
}

/// `Tr(Σ_W)/Tr(Σ_T)` of row-major `N × dim` features.
pub fn nc1<T: Scalar>(rows: &[T], dim: usize, labels: &[usize], class_count: usize) -> Result<T> {
    ClassStatistics::from_rows(rows, dim, labels, class_count)?.nc1()
}

/// Running nearest-centroid accuracy against fixed centroids.
#[derive(Debug, Clone)]
pub struct CentroidAccuracy<'a, T: Scalar> {
    centroids: &'a ClassMeans<T>,
    correct: usize,
    seen: usize,
}

impl<'a, T: Scalar> CentroidAccuracy<'a, T> {
    pub fn new(centroids: &'a ClassMeans<T>) -> Self {
        Self {
            centroids,
            correct: 0,
            seen: 0,
        }
    }

    pub fn add(&mut self, rows: &[T], labels: &[usize]) -> Result<()> {
        let dim = self.centroids.dim;
        check_rows(rows, dim, labels)?;
        for (row, &label) in rows.chunks_exact(dim).zip(labels) {
            if label >= self.centroids.class_count() || self.centroids.counts[label] == 0 {
                return Err(PscError::InvalidInput(format!("class {label} missing from train")));
            }
            if self.centroids.nearest(row) == label {
                self.correct += 1;
            }
            self.seen += 1;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<T> {
        if self.seen == 0 {
            return Err(PscError::InvalidInput("no evaluation samples".into()));
        }
        Ok(T::from_usize_lossy(self.correct) / T::from_usize_lossy(self.seen))
    }
}

/// Nearest-class-centroid accuracy: centroids from `train`, scored on `eval`.
pub fn nc4<T: Scalar>(
    train: &[T],
    train_labels: &[usize],
    eval: &[T],
    eval_labels: &[usize],
    dim: usize,
    class_count: usize,
) -> Result<T> {
    let centroids = ClassMeans::from_rows(train, dim, train_labels, class_count)?;
    let mut acc = CentroidAccuracy::new(&centroids);
    acc.add(eval, eval_labels)?;
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerCollapse<T: Scalar> {
    pub layer_id: u32,
    pub nc1: T,
    pub nc4: T,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSelection {
    /// One or two layer ids, shallow to deep.
    pub layers: Vec<u32>,
    /// No layer had `nc1 > ε`; the least collapsed layer was returned.
    pub all_collapsed: bool,
}

/// Picks the layer with the highest NC4 among those with `nc1 > epsilon`
/// (ties to the deeper layer). When that layer's NC1 lies within
/// `near_band` of `epsilon`, the next deeper layer is included too.
pub fn select_candidate<T: Scalar>(
    entries: &[LayerCollapse<T>],
    epsilon: T,
    near_band: T,
) -> Result<CandidateSelection> {
    if entries.is_empty() {
        return Err(PscError::InvalidInput("no layers".into()));
    }
    let mut sorted = entries.to_vec();
    sorted.sort_by_key(|e| e.layer_id);

    let mut best: Option<usize> = None;
    for (i, e) in sorted.iter().enumerate() {
        if e.nc1 > epsilon && best.is_none_or(|b| e.nc4 >= sorted[b].nc4) {
            best = Some(i);
        }
    }

    match best {
        Some(i) => {
            let mut layers = vec![sorted[i].layer_id];
            if (sorted[i].nc1 - epsilon).abs() <= near_band {
                if let Some(next) = sorted.get(i + 1) {
                    layers.push(next.layer_id);
                }
            }
            Ok(CandidateSelection {
                layers,
                all_collapsed: false,
            })
        }
        None => {
            let mut top = 0;
            for (i, e) in sorted.iter().enumerate() {
                if e.nc1 > sorted[top].nc1 {
                    top = i;
                }
            }
            warn!("every layer has NC1 <= {epsilon}; falling back to the least collapsed layer");
            Ok(CandidateSelection {
                layers: vec![sorted[top].layer_id],
                all_collapsed: true,
            })
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScanConfig {
    pub epsilon: f64,
    pub near_band: f64,
    pub batch_size: usize,
    /// Average conv maps over space before measuring; fc layers are unaffected.
    pub spatial_pooling: bool,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            near_band: DEFAULT_NEAR_BAND,
            batch_size: 256,
            spatial_pooling: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollapseReport<T: Scalar> {
    pub entries: Vec<LayerCollapse<T>>,
    pub epsilon: T,
    pub near_band: T,
    pub selection: CandidateSelection,
}

impl<T: Scalar> CollapseReport<T> {
    pub fn from_entries(entries: Vec<LayerCollapse<T>>, epsilon: T, near_band: T) -> Result<Self> {
        let selection = select_candidate(&entries, epsilon, near_band)?;
        Ok(Self {
            entries,
            epsilon,
            near_band,
            selection,
        })
    }

    pub fn is_candidate(&self, layer_id: u32) -> bool {
        self.selection.layers.contains(&layer_id)
    }

    /// `layer_id,nc1,nc4,candidate` rows in depth order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_id,nc1,nc4,candidate\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                e.layer_id,
                e.nc1,
                e.nc4,
                u8::from(self.is_candidate(e.layer_id))
            );
        }
        out
    }
}

pub(crate) fn batch_rows<T: Scalar>(batch: &ActivationBatch) -> Vec<T> {
    batch.values.iter().map(|&v| T::of(v as f64)).collect()
}

/// Per-channel spatial means of a conv batch, `len() × channels`.
fn pooled_rows<T: Scalar>(batch: &ActivationBatch) -> Vec<T> {
    let channels = batch.shape.channels();
    let area = batch.shape.features_per_channel();
    let scale = T::from_usize_lossy(area);
    batch
        .values
        .chunks_exact(area)
        .map(|map| map.iter().map(|&v| T::of(v as f64)).sum::<T>() / scale)
        .collect::<Vec<T>>()
        .chunks_exact(channels)
        .flatten()
        .copied()
        .collect()
}

/// NC1 on `train` and NC4 (train centroids, `val` accuracy) for one layer,
/// streaming both splits in batches.
pub fn measure_layer<T: Scalar>(
    train: &ActivationDataset,
    val: &ActivationDataset,
    layer_id: u32,
    config: &ScanConfig,
) -> Result<LayerCollapse<T>> {
    let batch_size = config.batch_size;
    let run = || -> Result<LayerCollapse<T>> {
        let train_shape = train.layer_header(layer_id)?.shape.sample;
        let val_shape = val.layer_header(layer_id)?.shape.sample;
        if train_shape != val_shape {
            return Err(PscError::Shape(format!("train shape {train_shape:?} vs val shape {val_shape:?}")));
        }
        let pool = config.spatial_pooling && train_shape.kind() == LayerKind::Conv;
        let dim = if pool { train_shape.channels() } else { train_shape.len() };
        let rows = |b: &ActivationBatch| if pool { pooled_rows(b) } else { batch_rows(b) };
        let class_count = train.class_count().max(val.class_count());

        let mut means = ClassMeanAccumulator::<T>::new(dim, class_count);
        for batch in train.batches(layer_id, batch_size)? {
            let batch = batch?;
            means.add(&rows(&batch), &batch.labels)?;
        }
        let means = means.finish()?;

        let mut scatter = ScatterAccumulator::new(&means);
        for batch in train.batches(layer_id, batch_size)? {
            let batch = batch?;
            scatter.add(&rows(&batch), &batch.labels)?;
        }
        let nc1 = scatter.finish()?.nc1()?;

        let mut accuracy = CentroidAccuracy::new(&means);
        for batch in val.batches(layer_id, batch_size)? {
            let batch = batch?;
            accuracy.add(&rows(&batch), &batch.labels)?;
        }
        Ok(LayerCollapse {
            layer_id,
            nc1,
            nc4: accuracy.finish()?,
        })
    };
    run().map_err(|e| e.in_layer(layer_id))
}

/// Measures every layer in depth order, one layer in memory at a time, and
/// selects the candidate layer(s).
pub fn scan_layers<T: Scalar>(
    train: &ActivationDataset,
    val: &ActivationDataset,
    config: &ScanConfig,
) -> Result<CollapseReport<T>> {
    let ids = train.layer_ids();
    if ids.is_empty() {
        return Err(PscError::InvalidInput("no layers".into()));
    }
    if ids != val.layer_ids() {
        return Err(PscError::InvalidInput(format!(
            "train layers {ids:?} differ from val layers {:?}",
            val.layer_ids()
        )));
    }
    if train.class_count() != val.class_count() {
        return Err(PscError::InvalidInput(format!(
            "train has {} classes, val has {}",
            train.class_count(),
            val.class_count()
        )));
    }
    let entries = ids
        .iter()
        .map(|&id| measure_layer::<T>(train, val, id, config))
        .collect::<Result<Vec<_>>>()?;
    CollapseReport::from_entries(entries, T::of(config.epsilon), T::of(config.near_band))
}
