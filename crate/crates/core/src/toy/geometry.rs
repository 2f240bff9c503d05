use nalgebra::DMatrix;

use super::data::LabeledPoints;
use super::mlp::{forward_collect, Mlp};
use crate::error::Result;
use crate::linalg::symmetric_eigen_sorted;
use crate::scalar::Scalar;

/// How one layer separates a point from its perturbations.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGeometry<T: Scalar> {
    pub layer_id: u32,
    /// Mean `‖h(x) − h(x + Δ e₂)‖`; the label ignores `x₂`.
    pub irrelevant_distance: T,
    /// Mean `‖h(x) − h(x + Δ e₁)‖`.
    pub relevant_distance: T,
    /// Per-point coordinates on the two leading principal axes of `h(x)`.
    pub pca: Vec<[T; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryReport<T: Scalar> {
    pub delta: T,
    pub layers: Vec<LayerGeometry<T>>,
}

impl<T: Scalar> GeometryReport<T> {
    pub fn layer(&self, layer_id: u32) -> Option<&LayerGeometry<T>> {
        self.layers.iter().find(|l| l.layer_id == layer_id)
    }

    /// `layer_id,irrelevant_distance,relevant_distance`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_id,irrelevant_distance,relevant_distance\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{}\n",
                l.layer_id,
                l.irrelevant_distance.to_f64_lossy(),
                l.relevant_distance.to_f64_lossy()
            ));
        }
        out
    }
}

fn mean_distance<T: Scalar>(a: &[T], b: &[T], width: usize) -> T {
    let n = a.len() / width;
    let total: T = a
        .chunks_exact(width)
        .zip(b.chunks_exact(width))
        .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| (p - q) * (p - q)).sum::<T>().sqrt())
        .sum();
    total / T::from_usize_lossy(n.max(1))
}

fn pca_2d<T: Scalar>(values: &[T], width: usize) -> Result<Vec<[T; 2]>> {
    let n = values.len() / width;
    let mut mean = vec![T::zero(); width];
    for row in values.chunks_exact(width) {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
    }
    let inv = T::one() / T::from_usize_lossy(n.max(1));
    mean.iter_mut().for_each(|m| *m *= inv);
    let mut cov = DMatrix::<T>::zeros(width, width);
    for row in values.chunks_exact(width) {
        for i in 0..width {
            for j in 0..width {
                cov[(i, j)] += (row[i] - mean[i]) * (row[j] - mean[j]);
            }
        }
    }
    cov *= inv;
    let eig = symmetric_eigen_sorted(&cov)?;
    Ok(values
        .chunks_exact(width)
        .map(|row| {
            let mut c = [T::zero(); 2];
            for (k, slot) in c.iter_mut().enumerate().take(width) {
                *slot = (0..width).map(|i| (row[i] - mean[i]) * eig.vectors[(i, k)]).sum();
            }
            c
        })
        .collect())
}

/// Per-layer perturbation distances for shifts of size `delta` along each axis.
pub fn geometry_report<T: Scalar>(net: &Mlp<T>, points: &LabeledPoints<T>, delta: T) -> Result<GeometryReport<T>> {
    let base = forward_collect(net, points)?;
    let relevant = forward_collect(net, &points.shifted(0, delta))?;
    let irrelevant = forward_collect(net, &points.shifted(1, delta))?;
    let layers = base
        .iter()
        .zip(relevant.iter().zip(&irrelevant))
        .map(|(b, (r, i))| {
            Ok(LayerGeometry {
                layer_id: b.layer_id,
                irrelevant_distance: mean_distance(&b.values, &i.values, b.width),
                relevant_distance: mean_distance(&b.values, &r.values, b.width),
                pca: pca_2d(&b.values, b.width)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(GeometryReport { delta, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::MlpSpec;

    #[test]
    fn report_covers_every_layer() {
        let net = Mlp::<f64>::init(&MlpSpec::default(), 1).unwrap();
        let pts = LabeledPoints {
            dim: 2,
            values: vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6],
            labels: vec![1, 0, 1],
        };
        let rep = geometry_report(&net, &pts, 1.5).unwrap();
        assert_eq!(rep.layers.len(), 6);
        assert!(rep.layers.iter().all(|l| l.pca.len() == 3 && l.irrelevant_distance >= 0.0));
        assert_eq!(rep.to_csv().lines().count(), 7);
    }
}
