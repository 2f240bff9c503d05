//! Probabilistic heads fitted on projected features.
//!
//! [`GdaModel`] scores feature-space density (the OOD signal);
//! [`LaplaceLinearModel`] gives in-distribution class probabilities from a
//! Bayesian multinomial logistic regression with a Kronecker-factored
//! Laplace posterior.

mod gda;
mod laplace;

pub use gda::{fit_gda, gda_log_density, GdaConfig, GdaModel, Pca};
pub use laplace::{
    fit_laplace, objective_and_gradient, predict_probabilities, select_prior_precision, train_linear_map,
    LaplaceConfig, LaplaceLinearModel, DEFAULT_PRIOR_GRID,
};

use crate::scalar::Scalar;

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn predictive_entropy<T: Scalar>(probabilities: &[T]) -> T {
    probabilities
        .iter()
        .filter(|&&p| p > T::zero())
        .map(|&p| -p * p.ln())
        .sum()
}

/// Combined per-sample output of the fitted heads.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyOutput<T: Scalar> {
    pub probabilities: Vec<T>,
    pub entropy: T,
    pub log_density: Option<T>,
    pub ood_flag: bool,
}

impl<T: Scalar> UncertaintyOutput<T> {
    /// `ood_flag` is set when the log-density falls below `ood_threshold`.
    pub fn new(probabilities: Vec<T>, log_density: Option<T>, ood_threshold: Option<T>) -> Self {
        let entropy = predictive_entropy(&probabilities);
        let ood_flag = matches!((log_density, ood_threshold), (Some(d), Some(t)) if d < t);
        Self {
            probabilities,
            entropy,
            log_density,
            ood_flag,
        }
    }

    pub fn predicted_class(&self) -> usize {
        crate::scalar::argmax(&self.probabilities)
    }
}
