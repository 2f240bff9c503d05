use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{PscError, Result};
use crate::scalar::Scalar;

const START_SEED: u64 = 0x5eed;
pub const SPECTRAL_TOLERANCE: f64 = 1e-6;
pub const SPECTRAL_MAX_ITERATIONS: usize = 10_000;

/// Largest singular value by power iteration on `WᵀW`.
///
/// Stops once the eigen-residual `‖WᵀW v − ρ v‖` is within `1e-6·ρ`, or when
/// the Rayleigh quotient `ρ` no longer moves at working precision.
pub fn spectral_norm_of<T: Scalar>(w: &DMatrix<T>) -> Result<T> {
    if w.is_empty() {
        return Err(PscError::InvalidInput("spectral norm of an empty matrix".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    let mut v = DVector::from_fn(w.ncols(), |_, _| T::of(StandardNormal.sample(&mut rng)));
    v.normalize_mut();
    let tol = T::of(SPECTRAL_TOLERANCE);
    let mut previous = T::zero();
    for _ in 0..SPECTRAL_MAX_ITERATIONS {
        let wv = w * &v;
        let u = w.transpose() * &wv;
        let rho = v.dot(&u);
        if rho <= T::zero() {
            // v lies in the null space; with a random start this means W = 0
            return Ok(if u.norm() == T::zero() { T::zero() } else { wv.norm() });
        }
        let residual = (&u - &v * rho).norm();
        if residual <= tol * rho || (rho - previous).abs() <= T::EPS * T::of(4.0) * rho {
            return Ok(rho.sqrt());
        }
        previous = rho;
        v = u / rho.max(T::EPS);
        v.normalize_mut();
    }
    Err(PscError::NonConvergence {
        iterations: SPECTRAL_MAX_ITERATIONS,
        gradient_norm: f64::NAN,
    })
}
