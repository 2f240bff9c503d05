use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use psc_core::collapse::{DEFAULT_EPSILON, DEFAULT_NEAR_BAND};
use psc_core::heads::{GdaConfig, DEFAULT_PRIOR_GRID};
use psc_core::projection::DEFAULT_DIM_TOLERANCE;
use psc_core::toy::ToyConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Projection size: swept automatically or fixed `C×D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Dims {
    #[default]
    Auto,
    Fixed { c_proj: usize, d_proj: usize },
}

impl FromStr for Dims {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Dims::Auto);
        }
        let (c, d) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected CxD or auto, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
        match (parse(c), parse(d)) {
            (Some(c_proj), Some(d_proj)) => Ok(Dims::Fixed { c_proj, d_proj }),
            _ => Err(format!("expected positive integers in CxD, got {s:?}")),
        }
    }
}

impl TryFrom<String> for Dims {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Dims> for String {
    fn from(d: Dims) -> String {
        d.to_string()
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dims::Auto => f.write_str("auto"),
            Dims::Fixed { c_proj, d_proj } => write!(f, "{c_proj}x{d_proj}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Gda,
    Laplace,
    #[default]
    Both,
}

impl Head {
    pub fn gda(self) -> bool {
        matches!(self, Head::Gda | Head::Both)
    }

    pub fn laplace(self) -> bool {
        matches!(self, Head::Laplace | Head::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub ood: Option<PathBuf>,
    /// In-distribution inputs with ambiguous labels, scored by entropy.
    pub ambiguous: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub epsilon: f64,
    pub near_band: f64,
    pub batch_size: usize,
    /// Measure collapse on spatially averaged conv maps.
    pub spatial_pooling: bool,
    /// Forces the candidate layer instead of reading `candidates.json`.
    pub layer: Option<u32>,
    pub dims: Dims,
    pub dim_tolerance: f64,
    pub head: Head,
    pub jitter_grid: Vec<f64>,
    pub holdout_fraction: f64,
    pub pca_dim: Option<usize>,
    pub prior_precision: f64,
    /// Pick the prior precision from `prior_grid` by validation NLL.
    pub select_prior_precision: bool,
    pub prior_grid: Vec<f64>,
    pub mc_samples: usize,
    pub seed: u64,
    pub ece_bins: usize,
    pub histogram_bins: usize,
    pub toy: ToyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gda = GdaConfig::default();
        Self {
            train: None,
            val: None,
            test: None,
            ood: None,
            ambiguous: None,
            out: None,
            epsilon: DEFAULT_EPSILON,
            near_band: DEFAULT_NEAR_BAND,
            batch_size: 256,
            spatial_pooling: false,
            layer: None,
            dims: Dims::Auto,
            dim_tolerance: DEFAULT_DIM_TOLERANCE,
            head: Head::Both,
            jitter_grid: gda.jitter_grid,
            holdout_fraction: gda.holdout_fraction,
            pca_dim: None,
            prior_precision: 1.0,
            select_prior_precision: false,
            prior_grid: DEFAULT_PRIOR_GRID.to_vec(),
            mc_samples: 100,
            seed: 0,
            ece_bins: psc_core::evaluation::DEFAULT_ECE_BINS,
            histogram_bins: psc_core::evaluation::DEFAULT_HISTOGRAM_BINS,
            toy: ToyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read --config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn out_dir(&self) -> CliResult<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("no output directory: pass --out".into()))
    }

    pub fn gda_config(&self) -> GdaConfig {
        GdaConfig {
            jitter_grid: self.jitter_grid.clone(),
            holdout_fraction: self.holdout_fraction,
            pca_dim: self.pca_dim,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |msg: String| Err(CliError::Usage(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.epsilon.is_finite() && self.near_band >= 0.0) {
            return bad("epsilon must be finite and near_band non-negative".into());
        }
        if !(self.prior_precision > 0.0) {
            return bad(format!("prior_precision must be positive, got {}", self.prior_precision));
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1".into());
        }
        if self.ece_bins == 0 || self.histogram_bins == 0 {
            return bad("bin counts must be at least 1".into());
        }
        Ok(())
    }
}

/// Returns the manifest path behind `flag` or a usage error naming it.
pub fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing {flag} manifest")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_parse_and_print() {
        assert_eq!("auto".parse::<Dims>().unwrap(), Dims::Auto);
        assert_eq!("2x8".parse::<Dims>().unwrap(), Dims::Fixed { c_proj: 2, d_proj: 8 });
        assert!("0x8".parse::<Dims>().is_err());
        assert!("8".parse::<Dims>().is_err());
        assert_eq!(Dims::Fixed { c_proj: 3, d_proj: 4 }.to_string(), "3x4");
    }

    #[test]
    fn config_json_uses_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"dims": "1x2", "head": "gda"}"#).unwrap();
        assert_eq!(cfg.dims, Dims::Fixed { c_proj: 1, d_proj: 2 });
        assert_eq!(cfg.head, Head::Gda);
        assert_eq!(cfg.epsilon, 0.2);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
