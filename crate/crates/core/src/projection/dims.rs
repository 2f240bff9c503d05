use std::fmt::Write as _;

use serde::Serialize;

use crate::collapse::{nc1, nc4};
use crate::error::{PscError, Result};
use crate::scalar::Scalar;

use super::pipeline::TuckerProjection;
use super::reshape::StackedBatch;

/// Largest tolerated change in NC1 or NC4 relative to the unprojected layer.
pub const DEFAULT_DIM_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DimSweepEntry<T: Scalar> {
    pub c_proj: usize,
    pub d_proj: usize,
    pub nc1: T,
    pub nc4: T,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DimSelection<T: Scalar> {
    pub c_proj: usize,
    pub d_proj: usize,
    pub baseline_nc1: T,
    pub baseline_nc4: T,
    pub sweep: Vec<DimSweepEntry<T>>,
}

/// `{2, 4, 8, …}` below `n`, then `n` itself.
pub fn dim_grid(n: usize) -> Vec<usize> {
    let mut grid = Vec::new();
    let mut v = 2;
    while v < n {
        grid.push(v);
        v *= 2;
    }
    grid.push(n.max(1));
    grid
}

fn standardized_rows<T: Scalar>(projection: &TuckerProjection<T>, batch: &StackedBatch<T>) -> Result<Vec<T>> {
    let mut rows = Vec::with_capacity(batch.values.len());
    for i in 0..batch.len() {
        rows.extend(projection.standardize(batch.sample(i))?);
    }
    Ok(rows)
}

fn sweep_table<T: Scalar>(sweep: &[DimSweepEntry<T>]) -> String {
    let mut s = String::from("c_proj,d_proj,nc1,nc4,accepted\n");
    for e in sweep {
        let _ = writeln!(s, "{},{},{},{},{}", e.c_proj, e.d_proj, e.nc1, e.nc4, e.accepted);
    }
    s
}

/// Smallest grid dimensions whose projection keeps NC1 and NC4 within
/// `tolerance` of the standardized, unprojected layer (and keeps NC1 above
/// `epsilon` when the unprojected layer is above it).
///
/// `full` must be fitted at full dimensions; smaller fits are its leading
/// columns. NC1 is measured on `train`, NC4 with train centroids on `val`.
pub fn select_dims<T: Scalar>(
    full: &TuckerProjection<T>,
    train: &StackedBatch<T>,
    val: &StackedBatch<T>,
    class_count: usize,
    epsilon: T,
    tolerance: T,
) -> Result<DimSelection<T>> {
    if full.c_proj() != full.channels || full.d_proj() != full.features {
        return Err(PscError::InvalidInput("dimension sweep needs a full-rank projection".into()));
    }
    let width = full.input_len();
    let train_rows = standardized_rows(full, train)?;
    let val_rows = standardized_rows(full, val)?;
    let baseline_nc1 = nc1(&train_rows, width, &train.labels, class_count)?;
    let baseline_nc4 = nc4(&train_rows, &train.labels, &val_rows, &val.labels, width, class_count)?;

    let mut pairs: Vec<(usize, usize)> = dim_grid(full.channels)
        .into_iter()
        .flat_map(|c| dim_grid(full.features).into_iter().map(move |d| (c, d)))
        .collect();
    pairs.sort_by_key(|&(c, d)| (c * d, c, d));

    let mut sweep = Vec::new();
    for (c_proj, d_proj) in pairs {
        let mut candidate = full.clone();
        candidate.factors = full.factors.truncate(c_proj, d_proj)?;
        let p = candidate.output_dim();
        let project_all = |rows: &[T]| -> Result<Vec<T>> {
            let mut out = Vec::with_capacity(rows.len() / width * p);
            for row in rows.chunks_exact(width) {
                out.extend(candidate.project(row)?);
            }
            Ok(out)
        };
        let zt = project_all(&train_rows)?;
        let zv = project_all(&val_rows)?;
        // a projection that zeroes all variance counts as fully collapsed
        let proj_nc1 = nc1(&zt, p, &train.labels, class_count).unwrap_or_else(|_| T::zero());
        let proj_nc4 = nc4(&zt, &train.labels, &zv, &val.labels, p, class_count)?;
        let keeps_uncollapsed = baseline_nc1 <= epsilon || proj_nc1 > epsilon;
        let accepted = (proj_nc1 - baseline_nc1).abs() < tolerance
            && (proj_nc4 - baseline_nc4).abs() < tolerance
            && keeps_uncollapsed;
        sweep.push(DimSweepEntry {
            c_proj,
            d_proj,
            nc1: proj_nc1,
            nc4: proj_nc4,
            accepted,
        });
        if accepted {
            return Ok(DimSelection {
                c_proj,
                d_proj,
                baseline_nc1,
                baseline_nc4,
                sweep,
            });
        }
    }
    Err(PscError::Numerical(format!(
        "no grid dimensions preserve the collapse metrics (baseline nc1={baseline_nc1}, nc4={baseline_nc4})\n{}",
        sweep_table(&sweep)
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_values() {
        assert_eq!(dim_grid(1), vec![1]);
        assert_eq!(dim_grid(2), vec![2]);
        assert_eq!(dim_grid(4), vec![2, 4]);
        assert_eq!(dim_grid(13), vec![2, 4, 8, 13]);
        assert_eq!(dim_grid(16), vec![2, 4, 8, 16]);
    }
}
