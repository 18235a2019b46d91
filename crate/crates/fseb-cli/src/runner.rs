//! The four verbs: `run`, `ablate`, `grid`, and `compare`.
//!
//! Seeds and ablation cells execute on one rayon pool sized by the
//! `FSEB_WORKERS` environment variable (default: all cores). Each cell
//! owns its output directory, so concurrent cells never share files.

use std::collections::BTreeMap;
use std::fs;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use fseb::metrics::{
    emit_grid_predictions, entropy_ood_auroc, evaluate, far_field_entropy, FarFieldEntropy,
    PredictionSet,
};
use fseb::model::ModelParams;
use fseb::train::train;

use crate::config::{ContextConfig, CorruptionConfig, DatasetRole, ExperimentConfig, GridConfig};
use crate::error::{CliError, Result};
use crate::report::{
    ablation_csv, build_run_result, compare_csv, compare_markdown, read_run_result, write_json,
    Artifacts, RunResult, SeedRecord, TrainSummary,
};

/// Environment variable bounding the worker thread count.
pub const WORKERS_ENV: &str = "FSEB_WORKERS";

/// Builds the process-wide rayon pool from `FSEB_WORKERS`.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var(WORKERS_ENV) {
        let workers: usize = raw.parse().map_err(|_| {
            CliError::Config(format!("{} must be a positive integer, got {:?}", WORKERS_ENV, raw))
        })?;
        if workers == 0 {
            return Err(CliError::Config(format!("{} must be positive", WORKERS_ENV)));
        }
        builder = builder.num_threads(workers);
    }
    builder
        .build()
        .map_err(|e| CliError::Other(format!("cannot build worker pool: {}", e)))
}

/// Wall-clock sidecar, kept out of `results.json` so result files stay
/// byte-reproducible.
#[derive(Debug, Clone, Serialize)]
struct Timing {
    total_seconds: f64,
    per_seed_seconds: BTreeMap<String, f64>,
}

fn run_seed(config: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<(SeedRecord, f64)> {
    let started = Instant::now();

    let train_data = config.data.build_train(seed)?;
    if train_data.dim() != config.model.input_dim {
        return Err(CliError::Config(format!(
            "training data dimension {} does not match model.input_dim {}",
            train_data.dim(),
            config.model.input_dim
        )));
    }
    if train_data.num_classes != config.model.output_dim {
        return Err(CliError::Config(format!(
            "training data has {} classes but model.output_dim is {}",
            train_data.num_classes, config.model.output_dim
        )));
    }
    let eval_data = config.data.build_eval(seed)?;
    if eval_data.dim() != config.model.input_dim {
        return Err(CliError::Config(format!(
            "evaluation data dimension {} does not match model.input_dim {}",
            eval_data.dim(),
            config.model.input_dim
        )));
    }

    let context = match &config.context {
        Some(cfg) => Some(cfg.resolve(&train_data, seed)?),
        None => None,
    };

    let outcome = train(
        &config.model,
        &config.train,
        &train_data,
        context.as_ref(),
        None,
        Some(&eval_data),
        seed,
    )
    .map_err(CliError::from_run_phase)?;

    let checkpoint_name = format!("checkpoint_seed{}.json", seed);
    outcome
        .params
        .save_checkpoint(&out_dir.join(&checkpoint_name))
        .map_err(CliError::from_run_phase)?;

    let probs = outcome.params.predict_proba(&eval_data.inputs).map_err(CliError::from_run_phase)?;
    let ps = PredictionSet::new(probs, eval_data.labels.clone()).map_err(CliError::from_run_phase)?;
    let mut metrics = evaluate(&ps, config.eval.m_bins).map_err(CliError::from_run_phase)?;

    if let Some(ood_spec) = &config.eval.ood {
        let ood = ood_spec.build(seed, DatasetRole::Shift)?;
        if ood.dim() != config.model.input_dim {
            return Err(CliError::Config(format!(
                "eval.ood dimension {} does not match model.input_dim {}",
                ood.dim(),
                config.model.input_dim
            )));
        }
        let ood_probs =
            outcome.params.predict_proba(&ood.inputs).map_err(CliError::from_run_phase)?;
        // Entropy detection never reads labels; zeros keep the set valid
        // for shifted sources whose classes differ from the model's.
        let ood_ps = PredictionSet::new(ood_probs, vec![0; ood.len()])
            .map_err(CliError::from_run_phase)?;
        metrics.ood_auroc =
            Some(entropy_ood_auroc(&ps, &ood_ps).map_err(CliError::from_run_phase)?);
    }

    let mut far_field: Option<FarFieldEntropy> = None;
    let mut grid_csv: Option<String> = None;
    if let Some(grid) = &config.eval.grid {
        if grid.lows.len() != config.model.input_dim {
            return Err(CliError::Config(format!(
                "eval.grid dimension {} does not match model.input_dim {}",
                grid.lows.len(),
                config.model.input_dim
            )));
        }
        let spec = grid.to_spec();
        if grid.emit_csv {
            let name = format!("grid_seed{}.csv", seed);
            let mut file = File::create(out_dir.join(&name))?;
            emit_grid_predictions(&outcome.params, &spec, &mut file)
                .map_err(CliError::from_run_phase)?;
            grid_csv = Some(name);
        }
        if let Some(radius) = grid.far_radius {
            let points = spec.points::<f64>().map_err(CliError::from_run_phase)?;
            far_field = Some(
                far_field_entropy(&outcome.params, &train_data.inputs, &points, radius)
                    .map_err(CliError::from_run_phase)?,
            );
        }
    }

    let record = SeedRecord {
        seed,
        metrics,
        far_field,
        train: TrainSummary {
            epochs: outcome.history.len(),
            total_steps: outcome.steps.len(),
            final_epoch: outcome
                .history
                .last()
                .expect("training always runs at least one epoch")
                .clone(),
        },
        artifacts: Artifacts { checkpoint: checkpoint_name, grid_csv },
    };
    Ok((record, started.elapsed().as_secs_f64()))
}

/// Trains every seed of a validated config and writes `results.json`,
/// `timing.json`, and per-seed artifacts into its output directory.
/// Expects to run inside the worker pool.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult> {
    let out_dir = &config.output_dir;
    fs::create_dir_all(out_dir)?;
    let started = Instant::now();

    let per_seed: Vec<(SeedRecord, f64)> = config
        .seeds
        .par_iter()
        .map(|&seed| run_seed(config, seed, out_dir))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::with_capacity(per_seed.len());
    let mut per_seed_seconds = BTreeMap::new();
    for (record, seconds) in per_seed {
        per_seed_seconds.insert(record.seed.to_string(), seconds);
        records.push(record);
    }

    let result = build_run_result(config, records)?;
    write_json(&out_dir.join("results.json"), &result)?;
    write_json(
        &out_dir.join("timing.json"),
        &Timing { total_seconds: started.elapsed().as_secs_f64(), per_seed_seconds },
    )?;
    Ok(result)
}

pub fn cmd_run(config_path: &Path) -> Result<PathBuf> {
    let config = ExperimentConfig::load(config_path)?;
    let pool = worker_pool()?;
    let result = pool.install(|| run_experiment(&config))?;
    let results_path = config.output_dir.join("results.json");
    println!("wrote {} ({} seeds)", results_path.display(), result.per_seed.len());
    for (name, agg) in &result.aggregate {
        match agg.se {
            Some(se) => println!("  {}: {:.6} ± {:.6}", name, agg.mean, se),
            None => println!("  {}: {:.6}", name, agg.mean),
        }
    }
    Ok(results_path)
}

/// Config axes `ablate` can sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AblationAxis {
    /// Rows per context batch (`train.prior.context_batch_size`).
    ContextBatchSize,
    /// Context sampling rule (`context.kind`).
    ContextDistribution,
    /// Training-set fraction (`data.fraction`).
    DataFraction,
    /// Severity level of the configured corruptions.
    CorruptionLevel,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::ContextBatchSize => "context-batch-size",
            AblationAxis::ContextDistribution => "context-distribution",
            AblationAxis::DataFraction => "data-fraction",
            AblationAxis::CorruptionLevel => "corruption-level",
        }
    }
}

fn default_corruption() -> CorruptionConfig {
    CorruptionConfig {
        kind: fseb::data::CorruptionKind::GaussianNoise,
        level: 3,
        magnitudes: None,
    }
}

/// Builds one cell's config by changing exactly the swept axis.
fn apply_axis_value(
    base: &ExperimentConfig,
    axis: AblationAxis,
    value: &str,
) -> Result<ExperimentConfig> {
    let mut cell = base.clone();
    match axis {
        AblationAxis::ContextBatchSize => {
            let m: usize = value.parse().map_err(|_| {
                CliError::Config(format!("context-batch-size values must be integers, got {:?}", value))
            })?;
            cell.train.prior.context_batch_size = m;
        }
        AblationAxis::DataFraction => {
            let fraction: f64 = value.parse().map_err(|_| {
                CliError::Config(format!("data-fraction values must be numbers, got {:?}", value))
            })?;
            cell.data.fraction = Some(fraction);
        }
        AblationAxis::CorruptionLevel => {
            let level: u8 = value.parse().map_err(|_| {
                CliError::Config(format!("corruption-level values must be 1..=5, got {:?}", value))
            })?;
            let mut applied = false;
            if let Some(ContextConfig::TrainCorrupted { corruption }) = &mut cell.context {
                corruption.level = level;
                applied = true;
            }
            if let Some(corruption) = &mut cell.data.test_corruption {
                corruption.level = level;
                applied = true;
            }
            if !applied {
                return Err(CliError::Config(
                    "corruption-level needs a train-corrupted context or a data.test_corruption in the base config"
                        .into(),
                ));
            }
        }
        AblationAxis::ContextDistribution => {
            let next = match value {
                "train-inputs" => ContextConfig::TrainInputs,
                "train-corrupted" => {
                    let corruption = match &cell.context {
                        Some(ContextConfig::TrainCorrupted { corruption }) => corruption.clone(),
                        _ => cell.data.test_corruption.clone().unwrap_or_else(default_corruption),
                    };
                    ContextConfig::TrainCorrupted { corruption }
                }
                "uniform-box" => match &cell.context {
                    Some(ContextConfig::UniformBox { lows, highs }) => {
                        ContextConfig::UniformBox { lows: lows.clone(), highs: highs.clone() }
                    }
                    _ => {
                        // No bounds in the base config: box in the first
                        // seed's training inputs with a fixed margin, so
                        // the cell stays deterministic and its embedded
                        // config reproduces it.
                        let first_seed = cell.seeds[0];
                        let data = cell.data.build_train(first_seed)?;
                        let (lows, highs) = ExperimentConfig::fallback_box(&data, 0.5)?;
                        ContextConfig::UniformBox { lows, highs }
                    }
                },
                "external-dataset" => match &cell.context {
                    Some(ContextConfig::ExternalDataset { source }) => {
                        ContextConfig::ExternalDataset { source: source.clone() }
                    }
                    _ => {
                        return Err(CliError::Config(
                            "context-distribution value external-dataset needs the base config to define the source"
                                .into(),
                        ))
                    }
                },
                other => {
                    return Err(CliError::Config(format!(
                        "unknown context-distribution value {:?}; expected train-inputs, train-corrupted, uniform-box, or external-dataset",
                        other
                    )))
                }
            };
            cell.context = Some(next);
        }
    }
    cell.output_dir =
        base.output_dir.join(format!("ablate-{}", axis.name())).join(value.replace('/', "-"));
    cell.validate()?;
    Ok(cell)
}

pub fn cmd_ablate(config_path: &Path, axis: AblationAxis, values_csv: &str) -> Result<PathBuf> {
    let base = ExperimentConfig::load(config_path)?;
    let values: Vec<String> = values_csv
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(str::to_string)
        .collect();
    if values.is_empty() {
        return Err(CliError::Config("--values must list at least one value".into()));
    }
    let cells: Vec<(String, ExperimentConfig)> = values
        .iter()
        .map(|v| Ok((v.clone(), apply_axis_value(&base, axis, v)?)))
        .collect::<Result<Vec<_>>>()?;

    let pool = worker_pool()?;
    let results: Vec<(String, RunResult)> = pool.install(|| {
        cells
            .par_iter()
            .map(|(value, config)| Ok((value.clone(), run_experiment(config)?)))
            .collect::<Result<Vec<_>>>()
    })?;

    let table_path = base.output_dir.join(format!("ablate-{}.csv", axis.name()));
    fs::create_dir_all(&base.output_dir)?;
    fs::write(&table_path, ablation_csv(axis.name(), &results))?;
    println!("wrote {} ({} cells)", table_path.display(), results.len());
    Ok(table_path)
}

pub fn cmd_grid(checkpoint: &Path, spec_path: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let config = ExperimentConfig::load(spec_path)?;
    let grid: &GridConfig = config.eval.grid.as_ref().ok_or_else(|| {
        CliError::Config(format!("{} does not define eval.grid", spec_path.display()))
    })?;
    let params = ModelParams::<f64>::load_checkpoint(checkpoint)
        .map_err(|e| CliError::Config(format!("{}: {}", checkpoint.display(), e)))?;
    if params.input_dim() != grid.lows.len() {
        return Err(CliError::Config(format!(
            "checkpoint expects {}-dimensional inputs but eval.grid is {}-dimensional",
            params.input_dim(),
            grid.lows.len()
        )));
    }
    let out_path = match out {
        Some(p) => p.to_path_buf(),
        None => config.output_dir.join("grid_from_checkpoint.csv"),
    };
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut file = File::create(&out_path)?;
    emit_grid_predictions(&params, &grid.to_spec(), &mut file).map_err(CliError::from_run_phase)?;
    file.flush()?;
    println!("wrote {}", out_path.display());
    Ok(out_path)
}

pub fn cmd_compare(paths: &[PathBuf], out_dir: &Path) -> Result<()> {
    if paths.is_empty() {
        return Err(CliError::Config("compare needs at least one results file".into()));
    }
    let results: Vec<RunResult> =
        paths.iter().map(|p| read_run_result(p)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<String> = paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            // Label by the parent directory (runs are one-per-directory),
            // falling back to an index when that is ambiguous.
            p.parent()
                .and_then(|d| d.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("result{}", i + 1))
        })
        .collect();

    let markdown = compare_markdown(&labels, &results);
    let csv = compare_csv(&labels, &results);
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("compare.md"), &markdown)?;
    fs::write(out_dir.join("compare.csv"), &csv)?;
    print!("{}", markdown);
    println!("wrote {} and compare.csv", out_dir.join("compare.md").display());
    Ok(())
}
