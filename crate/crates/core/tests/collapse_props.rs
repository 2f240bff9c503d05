mod common;

use common::*;
use proptest::prelude::*;
use psc_core::collapse::{nc1, nc4, scan_layers, ScanConfig};
use psc_core::store::{ActivationDataset, DatasetWriter, LayerHeader, LayerShape, Split};

#[test]
fn nc1_and_nc4_match_dense_oracles() {
    let mut r = rng(11);
    for case in 0..120 {
        let n = 10 + case % 190;
        let dim = 1 + case % 8;
        let k = 2 + case % 4;
        let (rows, labels) = blobs(&mut r, n, dim, k, 0.5 + (case % 3) as f64);
        let (eval, eval_labels) = blobs(&mut r, n / 2 + 2, dim, k, 1.0);
        let got = nc1(&rows, dim, &labels, k).unwrap();
        let want = dense_nc1(&rows, dim, &labels, k);
        assert!(rel_close(got, want, 1e-10), "case {case}: {got} vs {want}");
        let got4 = nc4(&rows, &labels, &eval, &eval_labels, dim, k).unwrap();
        assert_eq!(got4, pairwise_nc4(&rows, &labels, &eval, &eval_labels, dim, k), "case {case}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn nc1_is_rotation_translation_and_scale_invariant(seed in 0u64..10_000, dim in 1usize..6, scale in 0.01f64..100.0) {
        let mut r = rng(seed);
        let (rows, labels) = blobs(&mut r, 40, dim, 3, 1.0);
        let q = random_orthogonal(&mut r, dim);
        let shift: Vec<f64> = (0..dim).map(|_| normal(&mut r)).collect();
        let moved: Vec<f64> = rows
            .chunks(dim)
            .flat_map(|x| {
                let y = &q * nalgebra::DVector::from_column_slice(x);
                (0..dim).map(|j| scale * y[j] + shift[j]).collect::<Vec<_>>()
            })
            .collect();
        let a = nc1(&rows, dim, &labels, 3).unwrap();
        let b = nc1(&moved, dim, &labels, 3).unwrap();
        prop_assert!(rel_close(a, b, 1e-9), "{} vs {}", a, b);
        let c4a = nc4(&rows, &labels, &rows, &labels, dim, 3).unwrap();
        let c4b = nc4(&moved, &labels, &moved, &labels, dim, 3).unwrap();
        // isometries keep the centroid ranking unless two distances tie to rounding
        prop_assert!((c4a - c4b).abs() <= 1.0 / 40.0 + 1e-12);
    }

    #[test]
    fn nc_metrics_ignore_sample_order(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let (rows, labels) = blobs(&mut r, 30, 3, 2, 1.0);
        let order: Vec<usize> = (0..30).rev().collect();
        let rows_rev: Vec<f64> = order.iter().flat_map(|&i| rows[i * 3..i * 3 + 3].to_vec()).collect();
        let labels_rev: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let a = nc1(&rows, 3, &labels, 2).unwrap();
        let b = nc1(&rows_rev, 3, &labels_rev, 2).unwrap();
        prop_assert!(rel_close(a, b, 1e-12));
    }
}

#[test]
fn streamed_scan_matches_in_memory_metrics_for_any_batch_size() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(5);
    let (train_rows, train_labels) = blobs(&mut r, 57, 3, 3, 1.0);
    let (val_rows, val_labels) = blobs(&mut r, 23, 3, 3, 1.0);
    let to_f32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    let write = |split, rows: &[f64], labels: &[usize]| {
        let mut w = DatasetWriter::new(dir.path(), "blob", split, 3).unwrap();
        w.add_layer(&LayerHeader::new(0, LayerShape::fc(labels.len(), 3)), &to_f32(rows), labels).unwrap();
        // the same data as a 1-channel 1x3 conv map
        w.add_layer(&LayerHeader::new(1, LayerShape::conv(labels.len(), 1, 1, 3)), &to_f32(rows), labels).unwrap();
        w.finish().unwrap()
    };
    let train = ActivationDataset::open(&write(Split::Train, &train_rows, &train_labels)).unwrap();
    let val = ActivationDataset::open(&write(Split::Val, &val_rows, &val_labels)).unwrap();
    let widen = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect::<Vec<f64>>();
    let want1 = nc1(&widen(&train_rows), 3, &train_labels, 3).unwrap();
    let want4 = nc4(&widen(&train_rows), &train_labels, &widen(&val_rows), &val_labels, 3, 3).unwrap();
    for batch_size in [1, 7, 57, 1000] {
        let report = scan_layers::<f64>(&train, &val, &ScanConfig { batch_size, ..ScanConfig::default() }).unwrap();
        for e in &report.entries {
            assert!(rel_close(e.nc1, want1, 1e-12), "batch {batch_size}");
            assert_eq!(e.nc4, want4);
        }
    }
}

#[test]
fn single_precision_agrees_with_double() {
    let mut r = rng(3);
    let (rows, labels) = blobs(&mut r, 80, 4, 3, 1.0);
    let rows32: Vec<f32> = rows.iter().map(|&v| v as f32).collect();
    let a = nc1(&rows, 4, &labels, 3).unwrap();
    let b = nc1(&rows32, 4, &labels, 3).unwrap() as f64;
    assert!((a - b).abs() < 1e-4);
}

#[test]
fn pooled_conv_scan_matches_pooled_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(12);
    // 2 channels of 2x3 maps per sample
    let (train_rows, train_labels) = blobs(&mut r, 40, 12, 2, 1.0);
    let (val_rows, val_labels) = blobs(&mut r, 20, 12, 2, 1.0);
    let write = |split, rows: &[f64], labels: &[usize]| {
        let values: Vec<f32> = rows.iter().map(|&x| x as f32).collect();
        let mut w = DatasetWriter::new(dir.path(), "maps", split, 2).unwrap();
        w.add_layer(&LayerHeader::new(0, LayerShape::conv(labels.len(), 2, 2, 3)), &values, labels).unwrap();
        w.finish().unwrap()
    };
    let train = ActivationDataset::open(&write(Split::Train, &train_rows, &train_labels)).unwrap();
    let val = ActivationDataset::open(&write(Split::Val, &val_rows, &val_labels)).unwrap();
    let pool = |rows: &[f64]| -> Vec<f64> {
        rows.chunks(6).map(|m| m.iter().map(|&x| x as f32 as f64).sum::<f64>() / 6.0).collect()
    };
    let want1 = nc1(&pool(&train_rows), 2, &train_labels, 2).unwrap();
    let want4 = nc4(&pool(&train_rows), &train_labels, &pool(&val_rows), &val_labels, 2, 2).unwrap();
    let pooled = ScanConfig { spatial_pooling: true, batch_size: 7, ..ScanConfig::default() };
    let report = scan_layers::<f64>(&train, &val, &pooled).unwrap();
    assert!(rel_close(report.entries[0].nc1, want1, 1e-12));
    assert_eq!(report.entries[0].nc4, want4);
    let full = scan_layers::<f64>(&train, &val, &ScanConfig::default()).unwrap();
    assert!(!rel_close(full.entries[0].nc1, want1, 1e-6));
}
