//! The four pipeline stages plus toy-data generation, each reading and
//! writing fixed file names under the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use psc_core::collapse::{nc1, nc4, scan_layers, CandidateSelection, ScanConfig};
use psc_core::evaluation::{evaluate as evaluate_samples, Group};
use psc_core::heads::{
    fit_gda, fit_laplace, predictive_entropy, select_prior_precision, train_linear_map, LaplaceConfig,
};
use psc_core::projection::{compute_channel_moments, reshape_concat, select_dims, OutputScale, StackedBatch};
use psc_core::scalar::argmax;
use psc_core::store::{ActivationDataset, Split};
use psc_core::toy::{
    dump_activations, generate_sign_dataset, generate_sign_points, geometry_report, train_mlp, LabeledPoints,
};
use psc_core::{CollapseReport, FeatureBatch, GdaModel, LaplaceLinearModel, TuckerProjection};
use serde::{Deserialize, Serialize};

use crate::config::{required, Dims, RunConfig};
use crate::error::{CliError, CliResult};
use crate::predictions::{self, PredictionRow};

pub const COLLAPSE_CSV: &str = "collapse.csv";
pub const CANDIDATES_JSON: &str = "candidates.json";
pub const PROJECTION_FILE: &str = "projection.pscp";
pub const GDA_FILE: &str = "gda.pscg";
pub const LAPLACE_FILE: &str = "laplace.pscl";
pub const FIT_REPORT_JSON: &str = "fit_report.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const HISTOGRAM_CSV: &str = "histogram.csv";
pub const NETWORK_FILE: &str = "network.pscn";
pub const TRAIN_REPORT_JSON: &str = "train_report.json";
pub const GEOMETRY_CSV: &str = "geometry.csv";

/// Prediction file per evaluation group.
pub fn predictions_file(group: Group) -> &'static str {
    match group {
        Group::IdClean => "predictions.csv",
        Group::IdAmbiguous => "predictions_ambiguous.csv",
        Group::Ood => "predictions_ood.csv",
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|source| CliError::Output {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    write_file(path, text)
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path, hint: &str) -> CliResult<D> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {} ({e}); {hint}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("malformed {}: {e}", path.display())))
}

fn open(path: &Path) -> CliResult<ActivationDataset> {
    Ok(ActivationDataset::open(path)?)
}

/// Aligned batches of `layers`, stacked into one candidate tensor per batch.
fn stacked_batches<'a>(
    dataset: &'a ActivationDataset,
    layers: &[u32],
    batch_size: usize,
) -> psc_core::Result<impl Iterator<Item = psc_core::Result<StackedBatch<f64>>> + 'a> {
    let mut readers = layers
        .iter()
        .map(|&id| dataset.batches(id, batch_size))
        .collect::<psc_core::Result<Vec<_>>>()?;
    Ok(std::iter::from_fn(move || {
        let mut parts = Vec::with_capacity(readers.len());
        for reader in readers.iter_mut() {
            match reader.next()? {
                Ok(batch) => parts.push(batch),
                Err(e) => return Some(Err(e)),
            }
        }
        Some(reshape_concat(&parts))
    }))
}

fn stacked_all(dataset: &ActivationDataset, layers: &[u32], batch_size: usize) -> CliResult<StackedBatch<f64>> {
    let mut all: Option<StackedBatch<f64>> = None;
    for batch in stacked_batches(dataset, layers, batch_size)? {
        let batch = batch?;
        match &mut all {
            None => all = Some(batch),
            Some(acc) => {
                acc.values.extend(batch.values);
                acc.labels.extend(batch.labels);
            }
        }
    }
    all.ok_or_else(|| CliError::Usage("dataset has no samples".into()))
}

// ---------------------------------------------------------------- collapse

pub fn measure_collapse(cfg: &RunConfig, out: &Path) -> CliResult<CollapseReport> {
    let train = open(required(&cfg.train, "--train")?)?;
    let val = open(required(&cfg.val, "--val")?)?;
    let scan = ScanConfig {
        epsilon: cfg.epsilon,
        near_band: cfg.near_band,
        batch_size: cfg.batch_size,
        spatial_pooling: cfg.spatial_pooling,
    };
    let report = scan_layers::<f64>(&train, &val, &scan)?;
    write_file(&out.join(COLLAPSE_CSV), report.to_csv())?;
    write_json(&out.join(CANDIDATES_JSON), &report.selection)?;
    info!("candidate layer(s) {:?}", report.selection.layers);
    Ok(report)
}

// ---------------------------------------------------------------- fit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub c_proj: usize,
    pub d_proj: usize,
    pub nc1: f64,
    pub nc4: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub layers: Vec<u32>,
    pub channels: usize,
    pub features: usize,
    pub c_proj: usize,
    pub d_proj: usize,
    pub class_count: usize,
    /// Collapse metrics of the standardized layer before projection.
    pub nc1_before: f64,
    pub nc4_before: f64,
    pub nc1_after: f64,
    pub nc4_after: f64,
    pub sweep: Vec<SweepRow>,
    pub jitter: Option<f64>,
    pub prior_precision: Option<f64>,
    /// `(τ, validation NLL)` when the prior precision was selected.
    pub prior_sweep: Vec<(f64, f64)>,
}

fn candidate_layers(cfg: &RunConfig, out: &Path) -> CliResult<Vec<u32>> {
    if let Some(layer) = cfg.layer {
        return Ok(vec![layer]);
    }
    let selection: CandidateSelection = read_json(
        &out.join(CANDIDATES_JSON),
        "run measure-collapse first or pass --layer",
    )?;
    if selection.layers.is_empty() {
        return Err(CliError::Usage("candidate selection lists no layers".into()));
    }
    Ok(selection.layers)
}

fn standardized(projection: &TuckerProjection, batch: &StackedBatch<f64>) -> CliResult<Vec<f64>> {
    let mut rows = Vec::with_capacity(batch.values.len());
    for i in 0..batch.len() {
        rows.extend(projection.standardize(batch.sample(i))?);
    }
    Ok(rows)
}

fn collapse_pair(train: &[f64], train_labels: &[usize], val: &[f64], val_labels: &[usize], dim: usize, k: usize) -> CliResult<(f64, f64)> {
    Ok((nc1(train, dim, train_labels, k)?, nc4(train, train_labels, val, val_labels, dim, k)?))
}

pub fn fit(cfg: &RunConfig, out: &Path) -> CliResult<FitReport> {
    let train = open(required(&cfg.train, "--train")?)?;
    let val = open(required(&cfg.val, "--val")?)?;
    let layers = candidate_layers(cfg, out)?;
    let k = train.class_count();
    if val.class_count() != k {
        return Err(CliError::Usage(format!("train has {k} classes, val has {}", val.class_count())));
    }

    let moments = compute_channel_moments(|| stacked_batches(&train, &layers, cfg.batch_size))?;
    let (channels, features) = (moments.channels, moments.features);
    let full = TuckerProjection::fit(&moments, channels, features)?;
    let train_st = stacked_all(&train, &layers, cfg.batch_size)?;
    let val_st = stacked_all(&val, &layers, cfg.batch_size)?;

    let (c_proj, d_proj, sweep) = match cfg.dims {
        Dims::Auto => {
            let sel = select_dims(&full, &train_st, &val_st, k, cfg.epsilon, cfg.dim_tolerance)?;
            let sweep = sel
                .sweep
                .iter()
                .map(|e| SweepRow {
                    c_proj: e.c_proj,
                    d_proj: e.d_proj,
                    nc1: e.nc1,
                    nc4: e.nc4,
                    accepted: e.accepted,
                })
                .collect();
            (sel.c_proj, sel.d_proj, sweep)
        }
        Dims::Fixed { c_proj, d_proj } => {
            if c_proj > channels || d_proj > features {
                return Err(CliError::Usage(format!(
                    "--dims {c_proj}x{d_proj} exceeds the candidate layer size {channels}x{features}"
                )));
            }
            (c_proj, d_proj, Vec::new())
        }
    };
    let mut projection = full.clone();
    projection.factors = full.factors.truncate(c_proj, d_proj)?;

    let width = channels * features;
    let (nc1_before, nc4_before) = collapse_pair(
        &standardized(&full, &train_st)?,
        &train_st.labels,
        &standardized(&full, &val_st)?,
        &val_st.labels,
        width,
        k,
    )?;
    let train_z = projection.transform_stacked(&train_st, false)?;
    let val_z = projection.transform_stacked(&val_st, false)?;
    let (nc1_after, nc4_after) =
        collapse_pair(&train_z.values, &train_z.labels, &val_z.values, &val_z.labels, train_z.dim, k)?;

    let mut report = FitReport {
        layers: layers.clone(),
        channels,
        features,
        c_proj,
        d_proj,
        class_count: k,
        nc1_before,
        nc4_before,
        nc1_after,
        nc4_after,
        sweep,
        jitter: None,
        prior_precision: None,
        prior_sweep: Vec::new(),
    };

    // stale head files from an earlier fit must not be picked up by predict
    for (wanted, name) in [(cfg.head.gda(), GDA_FILE), (cfg.head.laplace(), LAPLACE_FILE)] {
        if !wanted {
            let _ = fs::remove_file(out.join(name));
        }
    }

    if cfg.head.gda() {
        let gda = fit_gda(&train_z, k, &cfg.gda_config())?;
        gda.save(&out.join(GDA_FILE))?;
        report.jitter = Some(gda.jitter);
    }
    if cfg.head.laplace() {
        projection.output_scale = Some(OutputScale::fit(&train_z)?);
        let train_s = projection.transform_stacked(&train_st, true)?;
        let mut laplace_cfg = LaplaceConfig {
            prior_precision: cfg.prior_precision,
            mc_samples: cfg.mc_samples,
            seed: cfg.seed,
            ..LaplaceConfig::default()
        };
        if cfg.select_prior_precision {
            let val_s = projection.transform_stacked(&val_st, true)?;
            let (tau, table) = select_prior_precision(&train_s, &val_s, k, &cfg.prior_grid, &laplace_cfg)?;
            laplace_cfg.prior_precision = tau;
            report.prior_sweep = table;
        }
        let weights = train_linear_map(&train_s, k, &laplace_cfg)?;
        let model = fit_laplace(&train_s, &weights, &laplace_cfg)?;
        model.save(&out.join(LAPLACE_FILE))?;
        report.prior_precision = Some(laplace_cfg.prior_precision);
    }
    projection.save(&out.join(PROJECTION_FILE))?;
    write_json(&out.join(FIT_REPORT_JSON), &report)?;
    info!(
        "fitted {c_proj}x{d_proj} projection on layer(s) {layers:?}: nc1 {nc1_before} -> {nc1_after}, nc4 {nc4_before} -> {nc4_after}"
    );
    Ok(report)
}

// ---------------------------------------------------------------- predict

struct Heads {
    projection: TuckerProjection,
    gda: Option<GdaModel>,
    laplace: Option<LaplaceLinearModel>,
    layers: Vec<u32>,
}

fn load_heads(cfg: &RunConfig, out: &Path) -> CliResult<Heads> {
    let report: FitReport = read_json(&out.join(FIT_REPORT_JSON), "run fit first")?;
    let need = |name: &str| -> CliResult<PathBuf> {
        let path = out.join(name);
        if path.exists() {
            Ok(path)
        } else {
            Err(CliError::Usage(format!(
                "{} not found; run fit with a matching --head",
                path.display()
            )))
        }
    };
    let projection = TuckerProjection::load(&need(PROJECTION_FILE)?)?;
    let gda = cfg.head.gda().then(|| need(GDA_FILE)).transpose()?.map(|p| GdaModel::load(&p)).transpose()?;
    let mut laplace = cfg
        .head
        .laplace()
        .then(|| need(LAPLACE_FILE))
        .transpose()?
        .map(|p| LaplaceLinearModel::load(&p))
        .transpose()?;
    if let Some(model) = &mut laplace {
        model.mc_samples = cfg.mc_samples;
        model.seed = cfg.seed;
        if projection.output_scale.is_none() {
            return Err(CliError::Usage("projection has no output scaling; refit with the Laplace head".into()));
        }
    }
    Ok(Heads {
        projection,
        gda,
        laplace,
        layers: report.layers,
    })
}

fn predict_batch(heads: &Heads, batch: &StackedBatch<f64>) -> CliResult<Vec<PredictionRow>> {
    let raw: FeatureBatch = heads.projection.transform_stacked(batch, false)?;
    let mut densities = vec![None; batch.len()];
    let mut probabilities: Vec<Vec<f64>> = vec![Vec::new(); batch.len()];
    if let Some(gda) = &heads.gda {
        for i in 0..batch.len() {
            let z = raw.row(i);
            densities[i] = Some(gda.log_density(z)?);
            probabilities[i] = gda.class_posterior(z)?;
        }
    }
    if let Some(model) = &heads.laplace {
        let scaled = heads.projection.transform_stacked(batch, true)?;
        probabilities = model.predict_batch(&scaled)?;
    }
    Ok(probabilities
        .into_iter()
        .zip(densities)
        .enumerate()
        .map(|(i, (p, log_density))| PredictionRow {
            sample_id: (batch.start + i) as u64,
            label: batch.labels[i],
            pred: argmax(&p),
            log_density,
            entropy: predictive_entropy(&p),
            probabilities: p,
        })
        .collect())
}

fn predict_split(cfg: &RunConfig, heads: &Heads, manifest: &Path, path: &Path) -> CliResult<usize> {
    let dataset = open(manifest)?;
    let classes = heads
        .laplace
        .as_ref()
        .map(|m| m.class_count())
        .or_else(|| heads.gda.as_ref().map(|g| g.class_count()))
        .unwrap_or(0);
    let mut text = predictions::header(classes);
    text.push('\n');
    let mut count = 0;
    for batch in stacked_batches(&dataset, &heads.layers, cfg.batch_size)? {
        for row in predict_batch(heads, &batch?)? {
            predictions::write_row(&mut text, &row);
            count += 1;
        }
    }
    write_file(path, text)?;
    Ok(count)
}

/// Writes one prediction file per supplied group; stale files of omitted
/// groups are removed so `evaluate` only sees this run's inputs.
pub fn predict(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let test = required(&cfg.test, "--test")?;
    let heads = load_heads(cfg, out)?;
    for (group, manifest) in [
        (Group::IdClean, Some(test)),
        (Group::IdAmbiguous, cfg.ambiguous.as_deref()),
        (Group::Ood, cfg.ood.as_deref()),
    ] {
        let path = out.join(predictions_file(group));
        match manifest {
            Some(m) => {
                let n = predict_split(cfg, &heads, m, &path)?;
                info!("{}: {n} predictions", path.display());
            }
            None => {
                let _ = fs::remove_file(&path);
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- evaluate

pub fn evaluate(cfg: &RunConfig, out: &Path) -> CliResult<psc_core::evaluation::MetricReport<f64>> {
    let mut samples = Vec::new();
    for group in Group::ALL {
        let path = out.join(predictions_file(group));
        if group != Group::IdClean && !path.exists() {
            info!("no {} predictions; metrics for that group are skipped", group.as_str());
            continue;
        }
        samples.extend(predictions::read(&path)?.into_iter().map(|r| r.into_scored(group)));
    }
    let report = evaluate_samples(&samples, cfg.ece_bins, cfg.histogram_bins)?;
    write_file(&out.join(METRICS_JSON), report.metrics_json())?;
    write_file(&out.join(HISTOGRAM_CSV), report.histogram.to_csv())?;
    Ok(report)
}

/// measure-collapse (unless a layer is forced), fit, predict, evaluate.
pub fn run_all(cfg: &RunConfig, out: &Path) -> CliResult<psc_core::evaluation::MetricReport<f64>> {
    if cfg.layer.is_none() {
        measure_collapse(cfg, out)?;
    }
    fit(cfg, out)?;
    predict(cfg, out)?;
    evaluate(cfg, out)
}

// ---------------------------------------------------------------- toy

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRunReport {
    pub val_accuracy: f64,
    pub train_accuracy: f64,
    pub final_loss: f64,
    pub epochs: usize,
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub ood: PathBuf,
}

/// Shift of the OOD split along the irrelevant axis, in units of σ.
pub const TOY_OOD_SHIFT_SIGMAS: f64 = 6.0;
/// Perturbation size of the geometry report, in units of σ.
pub const TOY_GEOMETRY_SIGMAS: f64 = 5.0;
const TOY_TEST_SEED_SALT: u64 = 0x7e57_5eed;

/// Trains the sign-task MLP and dumps train/val/test/OOD activations
/// under `out/activations`.
pub fn train_toy(cfg: &RunConfig, out: &Path) -> CliResult<ToyRunReport> {
    let toy = &cfg.toy;
    let (train, val) = generate_sign_dataset::<f64>(&toy.data)?;
    let test: LabeledPoints<f64> = generate_sign_points(&toy.data, toy.data.n_val, toy.data.seed ^ TOY_TEST_SEED_SALT)?;
    let ood = test.shifted(1, TOY_OOD_SHIFT_SIGMAS * toy.data.sigma);
    let (net, trained) = train_mlp(&toy.network, &toy.training, &train, Some(&val))?;
    net.save(&out.join(NETWORK_FILE))?;

    let dir = out.join("activations");
    fs::create_dir_all(&dir).map_err(|source| CliError::Output {
        path: dir.clone(),
        source,
    })?;
    let dump = |points: &LabeledPoints<f64>, split| dump_activations(&net, points, &dir, "sign", split);
    let report = ToyRunReport {
        val_accuracy: trained.val_accuracy.unwrap_or(f64::NAN),
        train_accuracy: trained.train_accuracy,
        final_loss: trained.final_loss,
        epochs: trained.epochs,
        train: dump(&train, Split::Train)?,
        val: dump(&val, Split::Val)?,
        test: dump(&test, Split::Test)?,
        ood: dump(&ood, Split::Ood)?,
    };
    let geometry = geometry_report(&net, &val, TOY_GEOMETRY_SIGMAS * toy.data.sigma)?;
    write_file(&out.join(GEOMETRY_CSV), geometry.to_csv())?;
    write_json(&out.join(TRAIN_REPORT_JSON), &report)?;
    info!("toy network trained: val accuracy {}", report.val_accuracy);
    Ok(report)
}
