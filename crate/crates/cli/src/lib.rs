//! File-based workflow around `psc-core`: measure collapse, fit the
//! projection and heads, predict, evaluate.

pub mod config;
pub mod error;
pub mod lock;
pub mod predictions;
pub mod workflow;

pub use config::{Dims, Head, RunConfig};
pub use error::{CliError, CliResult, EXIT_COMPUTE, EXIT_VALIDATION};
pub use lock::OutputLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    TrainToy,
    MeasureCollapse,
    Fit,
    Predict,
    Evaluate,
    All,
}

/// Runs one stage with the output directory locked.
pub fn run_stage(stage: Stage, cfg: &RunConfig) -> CliResult<()> {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    let _lock = OutputLock::acquire(out)?;
    match stage {
        Stage::TrainToy => workflow::train_toy(cfg, out).map(drop),
        Stage::MeasureCollapse => workflow::measure_collapse(cfg, out).map(drop),
        Stage::Fit => workflow::fit(cfg, out).map(drop),
        Stage::Predict => workflow::predict(cfg, out),
        Stage::Evaluate => workflow::evaluate(cfg, out).map(drop),
        Stage::All => workflow::run_all(cfg, out).map(drop),
    }
}
