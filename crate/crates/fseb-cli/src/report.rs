//! Result files: the versioned run-result document, seed aggregation,
//! and the CSV/markdown emitters used by `ablate` and `compare`.
//!
//! Result JSON deliberately contains no timestamps or host details;
//! wall-clock numbers go to a separate timing file so that re-running a
//! config reproduces the results file byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fseb::metrics::{FarFieldEntropy, MetricsReport};
use fseb::train::EpochRecord;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

/// Identifier of the result document layout; bump when fields change.
pub const SCHEMA_ID: &str = "fseb.run_result.v1";

/// Mean and standard error of one metric across seeds.
///
/// The standard error is `sd / √n` with the `n − 1` variance divisor,
/// so two seeds give `|a − b| / 2`; it is omitted below two seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
}

pub fn aggregate_values(values: &[f64]) -> MetricAggregate {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let se = (n >= 2).then(|| {
        let var =
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    });
    MetricAggregate { mean, se }
}

/// Files a seed's run left on disk, relative to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub checkpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_csv: Option<String>,
}

/// Condensed view of one seed's training trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub total_steps: usize,
    pub final_epoch: EpochRecord,
}

/// Everything recorded for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub metrics: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub far_field: Option<FarFieldEntropy>,
    pub train: TrainSummary,
    pub artifacts: Artifacts,
}

/// The run-result document written as `results.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub schema: String,
    pub tool_version: String,
    /// `sha256:` + hex digest of the embedded config's canonical JSON.
    pub config_hash: String,
    /// The resolved config; re-running it reproduces every metric value.
    pub config: ExperimentConfig,
    pub per_seed: Vec<SeedRecord>,
    pub aggregate: BTreeMap<String, MetricAggregate>,
}

pub fn config_hash(config: &ExperimentConfig) -> Result<String> {
    let canonical = serde_json::to_vec(config)
        .map_err(|e| CliError::Other(format!("cannot serialize config: {}", e)))?;
    let digest = Sha256::digest(&canonical);
    let hex: String = digest.iter().map(|b| format!("{:02x}", b)).collect();
    Ok(format!("sha256:{}", hex))
}

/// Scalar metrics pulled out of a seed record for aggregation, keyed by
/// the names used in the `aggregate` map and table columns.
pub fn scalar_metrics(record: &SeedRecord) -> BTreeMap<String, f64> {
    let m = &record.metrics;
    let mut out = BTreeMap::new();
    out.insert("accuracy".to_string(), m.accuracy);
    out.insert("nll".to_string(), m.nll);
    out.insert("ece".to_string(), m.ece);
    out.insert("mean_confidence".to_string(), m.mean_confidence);
    out.insert("mean_entropy".to_string(), m.mean_entropy);
    out.insert("selective_auc".to_string(), m.selective_auc);
    if let Some(auroc) = m.ood_auroc {
        out.insert("ood_auroc".to_string(), auroc);
    }
    if let Some(far) = &record.far_field {
        if let Some(v) = far.far_mean {
            out.insert("far_field_entropy".to_string(), v);
        }
        if let Some(v) = far.near_mean {
            out.insert("near_field_entropy".to_string(), v);
        }
    }
    out
}

/// Aggregates the metrics present in every seed record.
pub fn aggregate_records(records: &[SeedRecord]) -> BTreeMap<String, MetricAggregate> {
    let per_seed: Vec<BTreeMap<String, f64>> = records.iter().map(scalar_metrics).collect();
    let mut out = BTreeMap::new();
    if let Some(first) = per_seed.first() {
        for name in first.keys() {
            let values: Vec<f64> =
                per_seed.iter().filter_map(|m| m.get(name)).copied().collect();
            if values.len() == per_seed.len() {
                out.insert(name.clone(), aggregate_values(&values));
            }
        }
    }
    out
}

pub fn build_run_result(
    config: &ExperimentConfig,
    per_seed: Vec<SeedRecord>,
) -> Result<RunResult> {
    Ok(RunResult {
        schema: SCHEMA_ID.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config_hash(config)?,
        config: config.clone(),
        aggregate: aggregate_records(&per_seed),
        per_seed,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Other(format!("cannot serialize {}: {}", path.display(), e)))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_run_result(path: &Path) -> Result<RunResult> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {}", path.display(), e)))?;
    let result: RunResult = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("cannot parse {}: {}", path.display(), e)))?;
    if result.schema != SCHEMA_ID {
        return Err(CliError::Config(format!(
            "{}: unsupported schema {:?}, expected {:?}",
            path.display(),
            result.schema,
            SCHEMA_ID
        )));
    }
    Ok(result)
}

/// Union of aggregate metric names across results, sorted.
fn metric_names(results: &[RunResult]) -> Vec<String> {
    let mut names: Vec<String> =
        results.iter().flat_map(|r| r.aggregate.keys().cloned()).collect();
    names.sort();
    names.dedup();
    names
}

fn format_mean_se(agg: Option<&MetricAggregate>) -> String {
    match agg {
        Some(MetricAggregate { mean, se: Some(se) }) => format!("{:.6} ± {:.6}", mean, se),
        Some(MetricAggregate { mean, se: None }) => format!("{:.6}", mean),
        None => "—".to_string(),
    }
}

/// Consolidated ablation table: one row per axis value, aggregate
/// columns per metric.
pub fn ablation_csv(axis: &str, cells: &[(String, RunResult)]) -> String {
    let results: Vec<RunResult> = cells.iter().map(|(_, r)| r.clone()).collect();
    let names = metric_names(&results);
    let mut header = vec![axis.to_string()];
    for name in &names {
        header.push(format!("{}_mean", name));
        header.push(format!("{}_se", name));
    }
    let mut out = header.join(",") + "\n";
    for (value, result) in cells {
        let mut row = vec![value.clone()];
        for name in &names {
            match result.aggregate.get(name) {
                Some(agg) => {
                    row.push(format!("{}", agg.mean));
                    row.push(agg.se.map(|se| format!("{}", se)).unwrap_or_default());
                }
                None => {
                    row.push(String::new());
                    row.push(String::new());
                }
            }
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Side-by-side markdown table of aggregate metrics; with exactly two
/// results a delta column (second minus first) is appended.
pub fn compare_markdown(labels: &[String], results: &[RunResult]) -> String {
    let names = metric_names(results);
    let delta = results.len() == 2;
    let mut out = String::new();
    out.push_str("| metric |");
    for label in labels {
        out.push_str(&format!(" {} |", label));
    }
    if delta {
        out.push_str(" delta |");
    }
    out.push('\n');
    out.push_str("| --- |");
    for _ in labels {
        out.push_str(" --- |");
    }
    if delta {
        out.push_str(" --- |");
    }
    out.push('\n');
    for name in &names {
        out.push_str(&format!("| {} |", name));
        for result in results {
            out.push_str(&format!(" {} |", format_mean_se(result.aggregate.get(name))));
        }
        if delta {
            match (results[1].aggregate.get(name), results[0].aggregate.get(name)) {
                (Some(b), Some(a)) => out.push_str(&format!(" {:+.6} |", b.mean - a.mean)),
                _ => out.push_str(" — |"),
            }
        }
        out.push('\n');
    }
    out
}

/// Flat CSV companion to [`compare_markdown`].
pub fn compare_csv(labels: &[String], results: &[RunResult]) -> String {
    let names = metric_names(results);
    let delta = results.len() == 2;
    let mut header = vec!["metric".to_string()];
    for label in labels {
        header.push(format!("{}_mean", label));
        header.push(format!("{}_se", label));
    }
    if delta {
        header.push("delta_mean".to_string());
    }
    let mut out = header.join(",") + "\n";
    for name in &names {
        let mut row = vec![name.clone()];
        for result in results {
            match result.aggregate.get(name) {
                Some(agg) => {
                    row.push(format!("{}", agg.mean));
                    row.push(agg.se.map(|se| format!("{}", se)).unwrap_or_default());
                }
                None => {
                    row.push(String::new());
                    row.push(String::new());
                }
            }
        }
        if delta {
            match (results[1].aggregate.get(name), results[0].aggregate.get(name)) {
                (Some(b), Some(a)) => row.push(format!("{}", b.mean - a.mean)),
                _ => row.push(String::new()),
            }
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
