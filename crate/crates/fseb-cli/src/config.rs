//! Experiment configuration: the JSON schema, validation, and the
//! resolution of dataset/context specs into concrete library objects.
//!
//! Seeding convention: each entry of `seeds` is a root seed for one fully
//! independent replicate. Every random choice in that replicate —
//! synthetic data generation, subsampling, label noise, initialization,
//! minibatch order, context draws, perturbations — derives its own stream
//! seed from the root, so ablations vary exactly the axis they change.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fseb::data::{
    bounding_box, corrupt, load_tabular, two_moons, Dataset as LibDataset, gaussian_blobs,
    ContextDistribution, CorruptionKind, CorruptionSpec, TabularFormat,
};
use fseb::model::MlpConfig;
use fseb::num::{derive_seed, streams};
use fseb::train::{Objective, TrainConfig};

use crate::error::{CliError, Result};

type Dataset = LibDataset<f64>;

/// Index passed to the dataset-generation stream, one per dataset role,
/// so the train, test, shift, and context sets never share draws.
#[derive(Debug, Clone, Copy)]
pub enum DatasetRole {
    Train = 0,
    Test = 1,
    Shift = 2,
    Context = 3,
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    TwoMoons {
        n: usize,
        noise_sd: f64,
    },
    GaussianBlobs {
        n: usize,
        centers: Vec<Vec<f64>>,
        noise_sd: f64,
    },
    File {
        path: PathBuf,
        format: TabularFormat,
    },
}

impl DatasetSpec {
    fn check_files(&self) -> Result<()> {
        if let DatasetSpec::File { path, .. } = self {
            if !path.exists() {
                return Err(CliError::Config(format!(
                    "data.file path does not exist: {}",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    /// Builds the dataset. Synthetic sources draw from the given root
    /// seed and role; file sources ignore both.
    pub fn build(&self, root_seed: u64, role: DatasetRole) -> Result<Dataset> {
        let seed = derive_seed(root_seed, streams::DATASET, role as u64);
        match self {
            DatasetSpec::TwoMoons { n, noise_sd } => {
                two_moons(*n, *noise_sd, seed).map_err(CliError::from_run_phase)
            }
            DatasetSpec::GaussianBlobs { n, centers, noise_sd } => {
                gaussian_blobs(*n, centers, *noise_sd, seed).map_err(CliError::from_run_phase)
            }
            DatasetSpec::File { path, format } => {
                load_tabular(path, *format).map_err(CliError::from_run_phase)
            }
        }
    }
}

/// Corruption settings as written in config files; the magnitude table is
/// optional and defaults to the kind's built-in ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionConfig {
    pub kind: CorruptionKind,
    pub level: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnitudes: Option<[f64; 5]>,
}

impl CorruptionConfig {
    pub fn resolve(&self) -> Result<CorruptionSpec> {
        match self.magnitudes {
            Some(m) => CorruptionSpec::with_magnitudes(self.kind, self.level, m),
            None => CorruptionSpec::new(self.kind, self.level),
        }
        .map_err(CliError::from_config_phase)
    }
}

/// Where context batches come from, as written in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ContextConfig {
    /// Draws from the (possibly subsampled) training inputs.
    TrainInputs,
    /// Draws from the training inputs, corrupted per draw.
    TrainCorrupted { corruption: CorruptionConfig },
    /// Draws from a separate dataset's inputs.
    ExternalDataset { source: DatasetSpec },
    /// Coordinatewise-uniform draws from an axis-aligned box.
    UniformBox { lows: Vec<f64>, highs: Vec<f64> },
}

impl ContextConfig {
    fn check_files(&self) -> Result<()> {
        if let ContextConfig::ExternalDataset { source } = self {
            source.check_files()?;
        }
        Ok(())
    }

    /// Resolves the config into a sampling distribution, given the
    /// already-built training inputs of this replicate.
    pub fn resolve(
        &self,
        train: &Dataset,
        root_seed: u64,
    ) -> Result<ContextDistribution<f64>> {
        Ok(match self {
            ContextConfig::TrainInputs => {
                ContextDistribution::Pool { inputs: train.inputs.clone() }
            }
            ContextConfig::TrainCorrupted { corruption } => {
                let spec = corruption.resolve()?;
                ContextDistribution::CorruptedPool {
                    inputs: train.inputs.clone(),
                    kind: spec.kind,
                    magnitude: spec.magnitude(),
                }
            }
            ContextConfig::ExternalDataset { source } => {
                let ds = source.build(root_seed, DatasetRole::Context)?;
                ContextDistribution::Pool { inputs: ds.inputs }
            }
            ContextConfig::UniformBox { lows, highs } => {
                ContextDistribution::UniformBox { lows: lows.clone(), highs: highs.clone() }
            }
        })
    }
}

/// Data sources and per-replicate preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DatasetSpec,
    /// Held-out evaluation set; metrics fall back to the training set
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<DatasetSpec>,
    /// Seeded without-replacement subsample of the training set, in (0, 1].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    /// Seeded uniform label flips on the training set, in [0, 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_noise: Option<f64>,
    /// Corruption applied to the evaluation inputs (shift studies).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_corruption: Option<CorruptionConfig>,
}

impl DataConfig {
    /// Builds this replicate's training set with subsampling and label
    /// noise applied.
    pub fn build_train(&self, root_seed: u64) -> Result<Dataset> {
        let mut data = self.train.build(root_seed, DatasetRole::Train)?;
        if let Some(fraction) = self.fraction {
            data = data
                .subsample(fraction, derive_seed(root_seed, streams::FRACTION, 0))
                .map_err(CliError::from_run_phase)?;
        }
        if let Some(noise) = self.label_noise {
            if noise > 0.0 {
                data = data
                    .with_label_noise(noise, derive_seed(root_seed, streams::LABEL_NOISE, 0))
                    .map_err(CliError::from_run_phase)?;
            }
        }
        Ok(data)
    }

    /// Builds this replicate's evaluation set: the test source if
    /// configured (else a clean copy of the training source), corrupted
    /// when a test corruption is configured.
    pub fn build_eval(&self, root_seed: u64) -> Result<Dataset> {
        let base = match &self.test {
            Some(spec) => spec.build(root_seed, DatasetRole::Test)?,
            None => self.train.build(root_seed, DatasetRole::Train)?,
        };
        match &self.test_corruption {
            Some(cfg) => {
                let spec = cfg.resolve()?;
                corrupt(&base, &spec, derive_seed(root_seed, streams::CORRUPT, 1))
                    .map_err(CliError::from_run_phase)
            }
            None => Ok(base),
        }
    }
}

fn default_m_bins() -> usize {
    15
}

/// Rectangular evaluation grid plus the far-field radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lows: Vec<f64>,
    pub highs: Vec<f64>,
    pub steps: Vec<usize>,
    /// Distance from the nearest training input beyond which a grid
    /// point counts as far-field.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub far_radius: Option<f64>,
    /// Write per-seed grid-prediction CSV files.
    #[serde(default)]
    pub emit_csv: bool,
}

impl GridConfig {
    pub fn to_spec(&self) -> fseb::metrics::GridSpec {
        fseb::metrics::GridSpec {
            lows: self.lows.clone(),
            highs: self.highs.clone(),
            steps: self.steps.clone(),
        }
    }
}

/// Metric options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_m_bins")]
    pub m_bins: usize,
    /// Shifted dataset for entropy-based OOD detection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood: Option<DatasetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { m_bins: default_m_bins(), ood: None, grid: None }
    }
}

/// A full experiment: model, objective, data, context, evaluation, seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: MlpConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Required by the function-space objectives, unused by `ps-map`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<ContextConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parses and validates a config file. Parse failures carry
    /// serde_json's line/column diagnostics.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {}", path.display(), e))
        })?;
        let config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
            CliError::Config(format!("cannot parse config {}: {}", path.display(), e))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(CliError::from_config_phase)?;
        self.train.validate().map_err(CliError::from_config_phase)?;
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must list at least one seed".into()));
        }
        {
            let mut sorted = self.seeds.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.seeds.len() {
                return Err(CliError::Config("seeds must be distinct".into()));
            }
        }
        if let Some(fraction) = self.data.fraction {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(CliError::Config(format!(
                    "data.fraction must be in (0, 1], got {}",
                    fraction
                )));
            }
        }
        if let Some(noise) = self.data.label_noise {
            if !(0.0..1.0).contains(&noise) {
                return Err(CliError::Config(format!(
                    "data.label_noise must be in [0, 1), got {}",
                    noise
                )));
            }
        }
        let needs_context = matches!(self.train.objective, Objective::EbMap | Objective::EbVi);
        if needs_context && self.context.is_none() {
            return Err(CliError::Config(format!(
                "objective {:?} needs a context distribution",
                self.train.objective
            )));
        }
        if let Some(corruption) = &self.data.test_corruption {
            corruption.resolve()?;
        }
        if let Some(context) = &self.context {
            if let ContextConfig::TrainCorrupted { corruption } = context {
                corruption.resolve()?;
            }
            context.check_files()?;
        }
        if let Some(grid) = &self.eval.grid {
            grid.to_spec().validate().map_err(CliError::from_config_phase)?;
            if let Some(r) = grid.far_radius {
                if !(r > 0.0) || !r.is_finite() {
                    return Err(CliError::Config(format!(
                        "eval.grid.far_radius must be positive and finite, got {}",
                        r
                    )));
                }
            }
        }
        if self.eval.m_bins == 0 {
            return Err(CliError::Config("eval.m_bins must be positive".into()));
        }
        self.data.train.check_files()?;
        if let Some(test) = &self.data.test {
            test.check_files()?;
        }
        if let Some(ood) = &self.eval.ood {
            ood.check_files()?;
        }
        Ok(())
    }

    /// A uniform box covering the training inputs with a margin, used
    /// when an ablation swaps the context kind to `uniform-box` and the
    /// base config does not provide bounds.
    pub fn fallback_box(train: &Dataset, margin: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        bounding_box(&train.inputs, margin).map_err(CliError::from_run_phase)
    }
}
