use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::LabeledPoints;
use super::spectral::spectral_norm_of;
use crate::codec::{LeReader, LeWriter};
use crate::error::{PscError, Result};
use crate::linalg::{from_row_major, to_row_major};
use crate::scalar::{argmax, Scalar};
use crate::store::{DatasetWriter, LayerHeader, LayerShape, Split};

const MAGIC: &[u8; 4] = b"PSCN";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub negative_slope: f64,
    /// Upper bound on every layer's largest singular value, enforced after each step.
    pub sn_bound: Option<f64>,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden: vec![4, 2, 2, 2, 2],
            output_dim: 2,
            negative_slope: 0.01,
            sn_bound: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 350,
            lr_start: 3e-2,
            lr_end: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-5,
            batch_size: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Cosine annealing from `lr_start` at epoch 0 towards `lr_end` at `epochs`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let t = epoch as f64 / self.epochs.max(1) as f64;
        self.lr_end + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T: Scalar> {
    /// `out × in`.
    pub weight: DMatrix<T>,
    pub bias: DVector<T>,
    pub activation: bool,
    pub residual: bool,
}

impl<T: Scalar> DenseLayer<T> {
    fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Leaky-ReLU MLP with identity skips on every square hidden layer:
/// `h = a(W x + b) + x`. The last layer emits logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T: Scalar> {
    pub layers: Vec<DenseLayer<T>>,
    pub negative_slope: T,
}

struct Cache<T: Scalar> {
    inputs: Vec<DMatrix<T>>,
    pre: Vec<DMatrix<T>>,
    logits: DMatrix<T>,
}

fn columns<T: Scalar>(points: &LabeledPoints<T>, idx: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(points.dim, idx.len(), |r, c| points.point(idx[c])[r])
}

impl<T: Scalar> Mlp<T> {
    /// PyTorch-style initialization: weights and biases `U(±1/√fan_in)`.
    pub fn init(spec: &MlpSpec, seed: u64) -> Result<Self> {
        if spec.input_dim == 0 || spec.output_dim == 0 || spec.hidden.contains(&0) {
            return Err(PscError::InvalidInput("layer widths must be positive".into()));
        }
        if let Some(b) = spec.sn_bound {
            if !(b > 0.0) {
                return Err(PscError::InvalidInput(format!("sn_bound must be positive, got {b}")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![spec.input_dim];
        widths.extend(&spec.hidden);
        widths.push(spec.output_dim);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = || T::of(rng.random_range(-bound..bound));
                let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| draw());
                let bias = DVector::from_fn(fan_out, |_, _| draw());
                let hidden = l < last;
                DenseLayer {
                    weight,
                    bias,
                    activation: hidden,
                    residual: hidden && fan_in == fan_out,
                }
            })
            .collect();
        Ok(Self {
            layers,
            negative_slope: T::of(spec.negative_slope),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::parameter_count).sum()
    }

    /// Parameters in layer order, each layer as row-major weight then bias.
    pub fn flat_parameters(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend(to_row_major(&l.weight));
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn set_flat_parameters(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return Err(PscError::Shape(format!(
                "{} parameters for a network with {}",
                params.len(),
                self.parameter_count()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let (r, c) = l.weight.shape();
            l.weight = from_row_major(r, c, &params[at..at + r * c]);
            at += r * c;
            l.bias.copy_from_slice(&params[at..at + r]);
            at += r;
        }
        Ok(())
    }

    fn leaky(&self, z: T) -> T {
        if z > T::zero() {
            z
        } else {
            z * self.negative_slope
        }
    }

    fn leaky_slope(&self, z: T) -> T {
        if z > T::zero() {
            T::one()
        } else {
            self.negative_slope
        }
    }

    fn forward_cached(&self, x: DMatrix<T>) -> Cache<T> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            let mut z = &layer.weight * &h;
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            let mut out = if layer.activation { z.map(|v| self.leaky(v)) } else { z.clone() };
            if layer.residual {
                out += &h;
            }
            inputs.push(h);
            pre.push(z);
            h = out;
        }
        Cache { inputs, pre, logits: h }
    }

    /// Outputs of every layer (hidden post-activation, then logits), each `width × N`.
    fn layer_outputs(&self, x: DMatrix<T>) -> Vec<DMatrix<T>> {
        let cache = self.forward_cached(x);
        let mut outs: Vec<DMatrix<T>> = cache.inputs.into_iter().skip(1).collect();
        outs.push(cache.logits);
        outs
    }

    pub fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.input_dim() {
            return Err(PscError::Shape(format!("input has {} entries, network expects {}", x.len(), self.input_dim())));
        }
        let cache = self.forward_cached(DMatrix::from_column_slice(x.len(), 1, x));
        Ok(cache.logits.as_slice().to_vec())
    }

    pub fn accuracy(&self, points: &LabeledPoints<T>) -> f64 {
        let idx: Vec<usize> = (0..points.len()).collect();
        let logits = self.forward_cached(columns(points, &idx)).logits;
        let hits = logits
            .column_iter()
            .zip(&points.labels)
            .filter(|(col, &y)| argmax(col.as_slice()) == y)
            .count();
        hits as f64 / points.len().max(1) as f64
    }

    /// Mean cross-entropy over `idx` plus `(weight_decay/2)‖θ‖²`, and its
    /// gradient in [`Self::flat_parameters`] order.
    pub fn loss_and_gradient(&self, points: &LabeledPoints<T>, idx: &[usize], weight_decay: T) -> (T, Vec<T>) {
        let cache = self.forward_cached(columns(points, idx));
        let n = T::from_usize_lossy(idx.len());
        let mut loss = T::zero();
        let mut delta = cache.logits.clone();
        for (c, &i) in idx.iter().enumerate() {
            let mut col = delta.column_mut(c);
            let max = col.max();
            col.apply(|v| *v = (*v - max).exp());
            let total = col.sum();
            col /= total;
            let y = points.labels[i];
            loss -= col[y].ln();
            col[y] -= T::one();
        }
        delta /= n;
        loss /= n;

        let mut grads: Vec<(DMatrix<T>, DVector<T>)> = Vec::with_capacity(self.layers.len());
        // delta: gradient w.r.t. the current layer's output
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let mut dz = delta.clone();
            if layer.activation {
                dz.zip_apply(&cache.pre[l], |d, z| *d *= self.leaky_slope(z));
            }
            let dw = &dz * cache.inputs[l].transpose();
            let db = dz.column_sum();
            let mut dx = layer.weight.transpose() * &dz;
            if layer.residual {
                dx += &delta;
            }
            grads.push((dw, db));
            delta = dx;
        }
        grads.reverse();

        let params = self.flat_parameters();
        let mut flat = Vec::with_capacity(params.len());
        for (dw, db) in grads {
            flat.extend(to_row_major(&dw));
            flat.extend(db.iter().copied());
        }
        let half = T::of(0.5);
        for (g, &p) in flat.iter_mut().zip(&params) {
            *g += weight_decay * p;
            loss += half * weight_decay * p * p;
        }
        (loss, flat)
    }

    /// Rescales each weight matrix to spectral norm at most `bound`.
    pub fn enforce_spectral_bound(&mut self, bound: T) -> Result<()> {
        for layer in &mut self.layers {
            let sigma = spectral_norm_of(&layer.weight)?;
            if sigma > bound {
                layer.weight *= bound / sigma;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| PscError::io(path, e))?;
        let mut w = LeWriter::new(BufWriter::new(file));
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        w.f64(self.negative_slope.to_f64_lossy())?;
        w.u64(self.layers.len() as u64)?;
        for l in &self.layers {
            w.u64(l.weight.ncols() as u64)?;
            w.u64(l.weight.nrows() as u64)?;
            w.u8(u8::from(l.activation))?;
            w.u8(u8::from(l.residual))?;
        }
        w.scalars(&self.flat_parameters())?;
        w.into_inner().flush().map_err(|e| PscError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| PscError::io(path, e))?;
        let mut r = LeReader::new(BufReader::new(file));
        r.expect_magic(MAGIC)?;
        r.expect_version(VERSION)?;
        let negative_slope = T::of(r.f64()?);
        let count = r.usize()?;
        if count == 0 || count > 1024 {
            return Err(PscError::Format(format!("implausible layer count {count}")));
        }
        let mut layers = Vec::with_capacity(count);
        let mut prev = None;
        for _ in 0..count {
            let (fan_in, fan_out) = (r.usize()?, r.usize()?);
            let (activation, residual) = (r.u8()? != 0, r.u8()? != 0);
            if fan_in == 0 || fan_out == 0 || prev.is_some_and(|p| p != fan_in) || (residual && fan_in != fan_out) {
                return Err(PscError::Format("inconsistent layer shapes in checkpoint".into()));
            }
            prev = Some(fan_out);
            layers.push(DenseLayer {
                weight: DMatrix::zeros(fan_out, fan_in),
                bias: DVector::zeros(fan_out),
                activation,
                residual,
            });
        }
        let mut net = Self { layers, negative_slope };
        let params = r.scalars(net.parameter_count())?;
        r.expect_eof()?;
        net.set_flat_parameters(&params)?;
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

/// Adam with cosine-annealed learning rate and L2 weight decay folded into
/// the gradient. Deterministic for a fixed seed.
pub fn train_mlp<T: Scalar>(
    spec: &MlpSpec,
    config: &TrainConfig,
    train: &LabeledPoints<T>,
    val: Option<&LabeledPoints<T>>,
) -> Result<(Mlp<T>, TrainReport)> {
    if train.is_empty() || train.dim != spec.input_dim {
        return Err(PscError::InvalidInput("training data is empty or has the wrong input width".into()));
    }
    if let Some(y) = train.labels.iter().find(|&&y| y >= spec.output_dim) {
        return Err(PscError::InvalidInput(format!("label {y} outside {} outputs", spec.output_dim)));
    }
    if !(config.lr_start >= config.lr_end && config.lr_end > 0.0) {
        return Err(PscError::InvalidInput("learning rates must satisfy lr_start >= lr_end > 0".into()));
    }
    let mut net = Mlp::<T>::init(spec, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let batch = config.batch_size.unwrap_or(train.len()).clamp(1, train.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let p = net.parameter_count();
    let (mut m, mut v) = (vec![T::zero(); p], vec![T::zero(); p]);
    let (b1, b2) = (T::of(config.beta1), T::of(config.beta2));
    let (eps, wd) = (T::of(config.adam_eps), T::of(config.weight_decay));
    let bound = spec.sn_bound.map(T::of);
    let mut step = 0i32;
    let mut last_loss = f64::NAN;
    for epoch in 0..config.epochs {
        let lr = T::of(config.learning_rate(epoch));
        if batch < train.len() {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let (loss, grad) = net.loss_and_gradient(train, chunk, wd);
            if !loss.is_finite_value() {
                return Err(PscError::Numerical(format!("training diverged at epoch {epoch}")));
            }
            last_loss = loss.to_f64_lossy();
            step += 1;
            let c1 = T::one() - b1.powi(step);
            let c2 = T::one() - b2.powi(step);
            let mut params = net.flat_parameters();
            for k in 0..p {
                m[k] = b1 * m[k] + (T::one() - b1) * grad[k];
                v[k] = b2 * v[k] + (T::one() - b2) * grad[k] * grad[k];
                params[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
            net.set_flat_parameters(&params)?;
            if let Some(b) = bound {
                net.enforce_spectral_bound(b)?;
            }
        }
    }
    let report = TrainReport {
        epochs: config.epochs,
        final_loss: last_loss,
        train_accuracy: net.accuracy(train),
        val_accuracy: val.map(|v| net.accuracy(v)),
    };
    Ok((net, report))
}

/// Activations of one layer for a point set, row-major `N × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations<T: Scalar> {
    pub layer_id: u32,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> LayerActivations<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.width..(i + 1) * self.width]
    }
}

/// Post-activation output of every hidden layer plus the logits, layer ids `0..`.
pub fn forward_collect<T: Scalar>(net: &Mlp<T>, points: &LabeledPoints<T>) -> Result<Vec<LayerActivations<T>>> {
    if points.dim != net.input_dim() {
        return Err(PscError::Shape(format!(
            "points have {} coordinates, network expects {}",
            points.dim,
            net.input_dim()
        )));
    }
    let idx: Vec<usize> = (0..points.len()).collect();
    Ok(net
        .layer_outputs(columns(points, &idx))
        .into_iter()
        .enumerate()
        .map(|(l, out)| LayerActivations {
            layer_id: l as u32,
            width: out.nrows(),
            // column-major width × N is row-major N × width
            values: out.as_slice().to_vec(),
        })
        .collect())
}

/// Writes every layer as an fc activation file plus manifest; returns the manifest path.
pub fn dump_activations<T: Scalar>(
    net: &Mlp<T>,
    points: &LabeledPoints<T>,
    dir: &Path,
    name: &str,
    split: Split,
) -> Result<PathBuf> {
    let layers = forward_collect(net, points)?;
    let mut writer = DatasetWriter::new(dir, name, split, net.class_count())?;
    for layer in &layers {
        let header = LayerHeader::new(layer.layer_id, LayerShape::fc(points.len(), layer.width));
        let values: Vec<f32> = layer.values.iter().map(|v| v.to_f64_lossy() as f32).collect();
        writer.add_layer(&header, &values, &points.labels)?;
    }
    writer.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_points() -> LabeledPoints<f64> {
        LabeledPoints {
            dim: 2,
            values: vec![0.3, -0.1, -0.4, 0.2, 0.1, 0.5, -0.2, -0.3],
            labels: vec![1, 0, 1, 0],
        }
    }

    #[test]
    fn residual_only_on_square_hidden_layers() {
        let net = Mlp::<f64>::init(&MlpSpec::default(), 0).unwrap();
        let flags: Vec<bool> = net.layers.iter().map(|l| l.residual).collect();
        assert_eq!(flags, vec![false, false, true, true, true, false]);
        assert!(!net.layers[5].activation);
    }

    #[test]
    fn zero_network_passes_inputs_through_skips() {
        let mut net = Mlp::<f64>::init(&MlpSpec::default(), 0).unwrap();
        let zeros = vec![0.0; net.parameter_count()];
        net.set_flat_parameters(&zeros).unwrap();
        let layers = forward_collect(&net, &toy_points()).unwrap();
        assert_eq!(layers.len(), 6);
        // layers 0 and 1 change width, so nothing passes through them
        for l in 0..5 {
            assert!(layers[l].values.iter().all(|&v| v == 0.0), "layer {l}");
        }
        assert!(layers[5].values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let net = Mlp::<f64>::init(&MlpSpec::default(), 3).unwrap();
        let pts = toy_points();
        let idx = [0, 1, 2, 3];
        let (_, grad) = net.loss_and_gradient(&pts, &idx, 1e-3);
        let theta = net.flat_parameters();
        let h = 1e-5;
        for k in 0..theta.len() {
            let mut probe = net.clone();
            let mut t = theta.clone();
            t[k] += h;
            probe.set_flat_parameters(&t).unwrap();
            let up = probe.loss_and_gradient(&pts, &idx, 1e-3).0;
            t[k] -= 2.0 * h;
            probe.set_flat_parameters(&t).unwrap();
            let down = probe.loss_and_gradient(&pts, &idx, 1e-3).0;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-4 * fd.abs().max(1e-3), "param {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = TrainConfig::default();
        assert!((c.learning_rate(0) - 3e-2).abs() < 1e-15);
        assert!((c.learning_rate(350) - 3e-4).abs() < 1e-15);
        assert!(c.learning_rate(175) < 3e-2 && c.learning_rate(175) > 3e-4);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = Mlp::<f64>::init(&MlpSpec::default(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.pscn");
        net.save(&path).unwrap();
        assert_eq!(Mlp::<f64>::load(&path).unwrap(), net);
    }
}
