use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use psc_cli::{run_stage, CliError, Dims, Head, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "psc", version, about = "Probabilistic skip connections for frozen classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Force the candidate layer instead of reading candidates.json.
    #[arg(long, global = true)]
    layer: Option<u32>,
    /// Projection size `CxD`, or `auto` for the dimension sweep.
    #[arg(long, global = true)]
    dims: Option<Dims>,
    #[arg(long, global = true, value_enum)]
    head: Option<Head>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    train: Option<PathBuf>,
    #[arg(long, global = true)]
    val: Option<PathBuf>,
    #[arg(long, global = true)]
    test: Option<PathBuf>,
    #[arg(long, global = true)]
    ood: Option<PathBuf>,
    #[arg(long, global = true)]
    ambiguous: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train the sign-task MLP and dump its activations.
    TrainToy,
    /// Per-layer NC1/NC4 and candidate selection.
    MeasureCollapse,
    /// Fit the projection and heads on the candidate layer.
    Fit,
    /// Score test (and optional OOD / ambiguous) activations.
    Predict,
    /// Metrics and histograms from the prediction files.
    Evaluate,
    /// measure-collapse, fit, predict, evaluate.
    All,
}

impl Cli {
    fn run_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let paths = [
            (&self.out, &mut cfg.out),
            (&self.train, &mut cfg.train),
            (&self.val, &mut cfg.val),
            (&self.test, &mut cfg.test),
            (&self.ood, &mut cfg.ood),
            (&self.ambiguous, &mut cfg.ambiguous),
        ];
        for (flag, slot) in paths {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        if self.layer.is_some() {
            cfg.layer = self.layer;
        }
        if let Some(d) = self.dims {
            cfg.dims = d;
        }
        if let Some(h) = self.head {
            cfg.head = h;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.toy.data.seed = seed;
            cfg.toy.training.seed = seed;
        }
        Ok(cfg)
    }
}

fn configure_threads() {
    let Ok(value) = std::env::var("PSC_THREADS") else {
        return;
    };
    match value.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("PSC_THREADS ignored: {e}");
            }
        }
        _ => log::warn!("PSC_THREADS={value:?} is not a positive integer; ignored"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    configure_threads();
    let stage = match cli.command {
        Command::TrainToy => Stage::TrainToy,
        Command::MeasureCollapse => Stage::MeasureCollapse,
        Command::Fit => Stage::Fit,
        Command::Predict => Stage::Predict,
        Command::Evaluate => Stage::Evaluate,
        Command::All => Stage::All,
    };
    match cli.run_config().and_then(|cfg| run_stage(stage, &cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
