mod common;

use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use psc_core::collapse::{nc1, nc4};
use psc_core::projection::{
    compute_channel_moments, covariance_to_correlation, fit_tucker, process_pipeline, ChannelMoments, StackedBatch,
    TuckerProjection,
};
use psc_core::store::{ActivationBatch, LayerShape};

fn random_stack(seed: u64, n: usize, channels: usize, features: usize) -> StackedBatch<f64> {
    let mut r = rng(seed);
    // correlated features with channel-specific scale and offset
    let mix = DMatrix::from_fn(features, features, |_, _| normal(&mut r));
    let mut values = Vec::with_capacity(n * channels * features);
    for _ in 0..n {
        for c in 0..channels {
            let z = nalgebra::DVector::from_fn(features, |_, _| normal(&mut r));
            let x = &mix * z;
            values.extend(x.iter().map(|v| (c as f64 + 1.0) * v + 10.0 * c as f64));
        }
    }
    StackedBatch {
        start: 0,
        channels,
        features,
        values,
        labels: (0..n).map(|i| i % 2).collect(),
    }
}

fn split(batch: &StackedBatch<f64>, size: usize) -> Vec<StackedBatch<f64>> {
    let w = batch.sample_len();
    (0..batch.len())
        .step_by(size)
        .map(|start| {
            let end = (start + size).min(batch.len());
            StackedBatch {
                start,
                channels: batch.channels,
                features: batch.features,
                values: batch.values[start * w..end * w].to_vec(),
                labels: batch.labels[start..end].to_vec(),
            }
        })
        .collect()
}

fn moments_in(batch: &StackedBatch<f64>, size: usize) -> ChannelMoments<f64> {
    let parts = split(batch, size);
    compute_channel_moments(|| Ok(parts.clone().into_iter().map(Ok))).unwrap()
}

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs() / scale))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn moments_do_not_depend_on_batching(seed in 0u64..10_000, n in 2usize..=64, c in 1usize..=4, d in 1usize..=16) {
        let batch = random_stack(seed, n, c, d);
        let whole = moments_in(&batch, n);
        for size in [1, 7] {
            let m = moments_in(&batch, size);
            prop_assert!(max_rel_diff(&whole.mean, &m.mean) <= 1e-12);
            prop_assert!(max_rel_diff(&whole.cov, &m.cov) <= 1e-12);
        }
    }
}

#[test]
fn moments_match_dense_covariance() {
    let batch = random_stack(4, 33, 3, 5);
    let m = moments_in(&batch, 4);
    for c in 0..3 {
        let rows: Vec<f64> = (0..33).flat_map(|i| batch.sample(i)[c * 5..(c + 1) * 5].to_vec()).collect();
        let x = rows_matrix(&rows, 5);
        let mean = x.row_mean();
        let centered = DMatrix::from_fn(33, 5, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / 33.0;
        for j in 0..5 {
            assert!((m.mean[c * 5 + j] - mean[j]).abs() < 1e-12);
            for k in 0..5 {
                assert!((m.cov_slice(c)[j * 5 + k] - cov[(j, k)]).abs() < 1e-10 * cov.amax());
            }
        }
    }
}

#[test]
fn tucker_factors_are_orthonormal_and_reconstruct() {
    for seed in 0..20 {
        let (c, d) = (1 + seed as usize % 4, 2 + seed as usize % 9);
        let batch = random_stack(seed, 40, c, d);
        let tensor = covariance_to_correlation(&moments_in(&batch, 40));
        let full = fit_tucker(&tensor, c, d).unwrap();
        let eye_a = full.a.transpose() * &full.a;
        let eye_b = full.b.transpose() * &full.b;
        assert!((eye_a - DMatrix::identity(c, c)).amax() < 1e-8);
        assert!((eye_b - DMatrix::identity(d, d)).amax() < 1e-8);
        assert!(full.reconstruction_error(&tensor) < 1e-8, "seed {seed}");

        let mut previous = f64::INFINITY;
        for d_proj in 1..=d {
            let f = fit_tucker(&tensor, c, d_proj).unwrap();
            let b = f.b.transpose() * &f.b;
            assert!((b - DMatrix::identity(d_proj, d_proj)).amax() < 1e-8);
            let err = f.reconstruction_error(&tensor);
            assert!(err <= previous + 1e-10, "seed {seed}, d_proj {d_proj}: {err} > {previous}");
            previous = err;
        }
    }
}

#[test]
fn full_projection_keeps_collapse_metrics() {
    for seed in 0..10 {
        let (c, d) = (1 + seed as usize % 3, 3 + seed as usize % 4);
        let mut batch = random_stack(seed, 60, c, d);
        // shift one class so the metrics are not trivial
        let w = batch.sample_len();
        for i in 0..batch.len() {
            if batch.labels[i] == 1 {
                batch.values[i * w..(i + 1) * w].iter_mut().for_each(|v| *v += 1.5);
            }
        }
        let m = moments_in(&batch, 60);
        let proj = TuckerProjection::fit(&m, c, d).unwrap();
        let standardized: Vec<f64> = (0..batch.len()).flat_map(|i| proj.standardize(batch.sample(i)).unwrap()).collect();
        let projected = proj.transform_stacked(&batch, false).unwrap();
        let l = &batch.labels;
        let before = (nc1(&standardized, w, l, 2).unwrap(), nc4(&standardized, l, &standardized, l, w, 2).unwrap());
        let after = (
            nc1(&projected.values, w, l, 2).unwrap(),
            nc4(&projected.values, l, &projected.values, l, w, 2).unwrap(),
        );
        assert!((before.0 - after.0).abs() < 1e-8, "seed {seed}");
        assert!((before.1 - after.1).abs() < 1e-8, "seed {seed}");
    }
}

#[test]
fn pipeline_on_raw_batches_equals_manual_steps() {
    let batch = random_stack(8, 12, 2, 3);
    let m = moments_in(&batch, 12);
    let proj = TuckerProjection::fit(&m, 1, 2).unwrap();
    let raw = ActivationBatch {
        layer_id: 0,
        shape: LayerShape::conv(12, 2, 1, 3).sample,
        start: 0,
        values: batch.values.iter().map(|&v| v as f32).collect(),
        labels: batch.labels.clone(),
    };
    let via_pipeline = process_pipeline(&[raw], &proj, false).unwrap();
    for i in 0..12 {
        let x: Vec<f64> = batch.sample(i).iter().map(|&v| v as f32 as f64).collect();
        let want = proj.project(&proj.standardize(&x).unwrap()).unwrap();
        assert_eq!(via_pipeline.row(i), want.as_slice());
    }
}
