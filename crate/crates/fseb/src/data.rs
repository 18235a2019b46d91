//! Datasets, synthetic tasks, corruption operators, and the context
//! distributions that supply evaluation points for the function-space
//! regularizer.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::index::sample as sample_without_replacement;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{real, rng_from_seed, std_normal, streams, derive_seed, to_f64, uniform, Real};
use crate::tensor::Tensor;

/// A labeled classification dataset with row-vector inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F: Real> {
    pub name: String,
    pub inputs: Tensor<F>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<F: Real> Dataset<F> {
    pub fn new(
        name: impl Into<String>,
        inputs: Tensor<F>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if inputs.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                details: format!("inputs must be rank 2, got {:?}", inputs.shape()),
            });
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                details: format!(
                    "{} input rows but {} labels",
                    inputs.shape()[0],
                    labels.len()
                ),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {} classes",
                bad, num_classes
            )));
        }
        Ok(Self { name: name.into(), inputs, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Copies the selected rows into a new (inputs, labels) pair.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<F>, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        let inputs = Tensor::from_vec(vec![indices.len(), d], data)
            .expect("gathered rows have consistent width");
        (inputs, labels)
    }

    /// Keeps a seeded without-replacement subset of about
    /// `fraction · len` points (at least one).
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Dataset<F>> {
        if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "fraction must be in (0, 1], got {}",
                fraction
            )));
        }
        let keep = ((fraction * self.len() as f64).round() as usize).clamp(1, self.len());
        let mut rng = rng_from_seed(seed);
        let mut idx: Vec<usize> =
            sample_without_replacement(&mut rng, self.len(), keep).into_iter().collect();
        idx.sort_unstable();
        let (inputs, labels) = self.gather(&idx);
        Dataset::new(
            format!("{}@{}", self.name, fraction),
            inputs,
            labels,
            self.num_classes,
        )
    }

    /// Reassigns a seeded fraction of labels to a different uniformly
    /// random class. Used to make synthetic tasks noisy.
    pub fn with_label_noise(&self, flip_fraction: f64, seed: u64) -> Result<Dataset<F>> {
        if !(0.0..=1.0).contains(&flip_fraction) {
            return Err(Error::InvalidArgument(format!(
                "flip fraction must be in [0, 1], got {}",
                flip_fraction
            )));
        }
        if self.num_classes < 2 && flip_fraction > 0.0 {
            return Err(Error::InvalidArgument(
                "cannot flip labels with fewer than two classes".into(),
            ));
        }
        let n_flip = (flip_fraction * self.len() as f64).round() as usize;
        let mut rng = rng_from_seed(seed);
        let flips: Vec<usize> =
            sample_without_replacement(&mut rng, self.len(), n_flip).into_iter().collect();
        let mut labels = self.labels.clone();
        for i in flips {
            // Draw from the other classes so a flip always changes the label.
            let shift = rng.random_range(1..self.num_classes);
            labels[i] = (labels[i] + shift) % self.num_classes;
        }
        Dataset::new(self.name.clone(), self.inputs.clone(), labels, self.num_classes)
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Two interleaved half-circles ("two moons") with Gaussian coordinate
/// noise. The outer moon is class 0; the inner, shifted moon is class 1.
pub fn two_moons<F: Real>(n: usize, noise_sd: f64, seed: u64) -> Result<Dataset<F>> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "two moons needs an even point count of at least 2, got {}",
            n
        )));
    }
    let n_out = n / 2;
    let n_in = n - n_out;
    let mut data: Vec<f64> = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for t in linspace(0.0, std::f64::consts::PI, n_out) {
        data.push(t.cos());
        data.push(t.sin());
        labels.push(0);
    }
    for t in linspace(0.0, std::f64::consts::PI, n_in) {
        data.push(1.0 - t.cos());
        data.push(0.5 - t.sin());
        labels.push(1);
    }
    let mut rng = rng_from_seed(seed);
    let data: Vec<F> = data
        .into_iter()
        .map(|v| real::<F>(v) + std_normal::<F, _>(&mut rng) * real(noise_sd))
        .collect();
    Dataset::new("two-moons", Tensor::from_vec(vec![n, 2], data)?, labels, 2)
}

/// Isotropic Gaussian blobs. Point `i` belongs to center `i mod c`, so the
/// classes stay balanced up to a remainder.
pub fn gaussian_blobs<F: Real>(
    n: usize,
    centers: &[Vec<f64>],
    noise_sd: f64,
    seed: u64,
) -> Result<Dataset<F>> {
    if centers.is_empty() {
        return Err(Error::InvalidArgument("blobs need at least one center".into()));
    }
    let d = centers[0].len();
    if d == 0 || centers.iter().any(|c| c.len() != d) {
        return Err(Error::InvalidArgument(
            "blob centers must be non-empty and share one dimension".into(),
        ));
    }
    let mut rng = rng_from_seed(seed);
    let mut data: Vec<F> = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % centers.len();
        for &coord in &centers[c] {
            data.push(real::<F>(coord) + std_normal::<F, _>(&mut rng) * real(noise_sd));
        }
        labels.push(c);
    }
    Dataset::new("blobs", Tensor::from_vec(vec![n, d], data)?, labels, centers.len())
}

/// On-disk dataset encodings understood by [`load_tabular`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TabularFormat {
    /// Header line `x0,...,x{D-1},label`, then one row per example.
    CsvLabeled,
    /// Big-endian IDX image file; the label file path is derived by
    /// substituting `labels` for `images` in the file name.
    IdxPair,
}

/// Loads a dataset from disk in one of the supported encodings.
pub fn load_tabular<F: Real>(path: &Path, format: TabularFormat) -> Result<Dataset<F>> {
    match format {
        TabularFormat::CsvLabeled => load_csv(path),
        TabularFormat::IdxPair => load_idx_pair(path),
    }
}

fn load_csv<F: Real>(path: &Path) -> Result<Dataset<F>> {
    let display = path.display().to_string();
    let bad = |line: usize, details: String| Error::DataFormat {
        path: display.clone(),
        details: format!("line {}: {}", line, details),
    };
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();

    let header = match lines.next() {
        Some((_, line)) => line?,
        None => return Err(bad(1, "file is empty".into())),
    };
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.len() < 2 || columns.last() != Some(&"label") {
        return Err(bad(1, "header must list feature columns then a final `label`".into()));
    }
    let d = columns.len() - 1;

    let mut data: Vec<F> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 1 {
            return Err(bad(line_no, format!("expected {} fields, found {}", d + 1, fields.len())));
        }
        for field in &fields[..d] {
            let v: f64 = field
                .parse()
                .map_err(|e| bad(line_no, format!("bad feature value {:?}: {}", field, e)))?;
            data.push(real(v));
        }
        let y: usize = fields[d]
            .parse()
            .map_err(|e| bad(line_no, format!("bad label {:?}: {}", fields[d], e)))?;
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(bad(2, "no data rows".into()));
    }
    let n = labels.len();
    let num_classes = labels.iter().max().unwrap() + 1;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(name, Tensor::from_vec(vec![n, d], data)?, labels, num_classes)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

fn load_idx_pair<F: Real>(images_path: &Path) -> Result<Dataset<F>> {
    let display = images_path.display().to_string();
    let file_name = images_path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::DataFormat {
            path: display.clone(),
            details: "path has no file name".into(),
        })?;
    if !file_name.contains("images") {
        return Err(Error::DataFormat {
            path: display.clone(),
            details: "idx image file name must contain `images` so the label path can be derived"
                .into(),
        });
    }
    let labels_path = images_path.with_file_name(file_name.replace("images", "labels"));

    let mut r = BufReader::new(File::open(images_path)?);
    let magic = read_u32_be(&mut r)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::DataFormat {
            path: display.clone(),
            details: format!("bad image magic {:#010x}", magic),
        });
    }
    let n = read_u32_be(&mut r)? as usize;
    let rows = read_u32_be(&mut r)? as usize;
    let cols = read_u32_be(&mut r)? as usize;
    let d = rows * cols;
    let mut bytes = vec![0u8; n * d];
    r.read_exact(&mut bytes)?;
    // Pixels arrive as bytes; map onto [0, 1].
    let data: Vec<F> = bytes.into_iter().map(|b| real(b as f64 / 255.0)).collect();

    let labels_display = labels_path.display().to_string();
    let mut r = BufReader::new(File::open(&labels_path)?);
    let magic = read_u32_be(&mut r)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::DataFormat {
            path: labels_display,
            details: format!("bad label magic {:#010x}", magic),
        });
    }
    let n_labels = read_u32_be(&mut r)? as usize;
    if n_labels != n {
        return Err(Error::DataFormat {
            path: labels_display,
            details: format!("{} labels for {} images", n_labels, n),
        });
    }
    let mut label_bytes = vec![0u8; n];
    r.read_exact(&mut label_bytes)?;
    let labels: Vec<usize> = label_bytes.into_iter().map(|b| b as usize).collect();
    let num_classes = labels.iter().max().map(|&m| m + 1).unwrap_or(1);
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, Tensor::from_vec(vec![n, d], data)?, labels, num_classes)
}

/// Input corruption families, each with five increasingly severe levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    /// Adds N(0, m²) to every coordinate.
    GaussianNoise,
    /// Zeroes a without-replacement fraction `m` of each row's coordinates.
    RandomErasure,
}

impl CorruptionKind {
    /// Severity→magnitude table. Levels run 1..=5 and magnitudes strictly
    /// increase within a kind.
    pub fn default_magnitude(self, level: u8) -> Result<f64> {
        let table: [f64; 5] = match self {
            CorruptionKind::GaussianNoise => [0.05, 0.1, 0.2, 0.4, 0.8],
            CorruptionKind::RandomErasure => [0.1, 0.2, 0.3, 0.45, 0.6],
        };
        if !(1..=5).contains(&level) {
            return Err(Error::InvalidArgument(format!(
                "corruption level must be 1..=5, got {}",
                level
            )));
        }
        Ok(table[(level - 1) as usize])
    }
}

fn apply_corruption<F: Real>(
    inputs: &Tensor<F>,
    kind: CorruptionKind,
    magnitude: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Tensor<F>> {
    if magnitude < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "corruption magnitude must be non-negative, got {}",
            magnitude
        )));
    }
    let (n, d) = (inputs.shape()[0], inputs.shape()[1]);
    let mut out = inputs.clone();
    match kind {
        CorruptionKind::GaussianNoise => {
            let m: F = real(magnitude);
            for v in out.data_mut() {
                *v = *v + std_normal::<F, _>(rng) * m;
            }
        }
        CorruptionKind::RandomErasure => {
            if magnitude > 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "erasure fraction must be at most 1, got {}",
                    magnitude
                )));
            }
            let k = ((magnitude * d as f64).round() as usize).min(d);
            for i in 0..n {
                let cols = sample_without_replacement(rng, d, k);
                for j in cols {
                    out.data_mut()[i * d + j] = F::zero();
                }
            }
        }
    }
    Ok(out)
}

/// A corruption operator at one of five severity levels, with the
/// level→magnitude table carried as data so callers can override it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// Severity level in 1..=5.
    pub level: u8,
    /// Magnitude per level; must increase strictly with the level.
    pub magnitudes: [f64; 5],
}

impl CorruptionSpec {
    /// Spec with the kind's built-in magnitude table.
    pub fn new(kind: CorruptionKind, level: u8) -> Result<Self> {
        kind.default_magnitude(level)?;
        let mut magnitudes = [0.0; 5];
        for (l, slot) in magnitudes.iter_mut().enumerate() {
            *slot = kind.default_magnitude(l as u8 + 1)?;
        }
        Ok(CorruptionSpec { kind, level, magnitudes })
    }

    /// Spec with a caller-supplied magnitude table.
    pub fn with_magnitudes(kind: CorruptionKind, level: u8, magnitudes: [f64; 5]) -> Result<Self> {
        if !(1..=5).contains(&level) {
            return Err(Error::InvalidArgument(format!(
                "corruption level must be 1..=5, got {}",
                level
            )));
        }
        if magnitudes.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument(
                "corruption magnitudes must increase strictly with the level".into(),
            ));
        }
        Ok(CorruptionSpec { kind, level, magnitudes })
    }

    /// Magnitude selected by the configured severity level.
    pub fn magnitude(&self) -> f64 {
        self.magnitudes[(self.level - 1) as usize]
    }
}

/// Applies a corruption at the severity level chosen by `spec`.
pub fn corrupt<F: Real>(dataset: &Dataset<F>, spec: &CorruptionSpec, seed: u64) -> Result<Dataset<F>> {
    let mut rng = rng_from_seed(seed);
    let inputs = apply_corruption(&dataset.inputs, spec.kind, spec.magnitude(), &mut rng)?;
    Dataset::new(
        format!("{}-{:?}-l{}", dataset.name, spec.kind, spec.level),
        inputs,
        dataset.labels.clone(),
        dataset.num_classes,
    )
}

/// Where context batches come from. The regularizer only ever sees
/// inputs, so labels play no role here.
#[derive(Debug, Clone)]
pub enum ContextDistribution<F: Real> {
    /// Rows drawn from a fixed pool (training set or a related dataset).
    Pool { inputs: Tensor<F> },
    /// Rows drawn from a pool and then corrupted per draw.
    CorruptedPool { inputs: Tensor<F>, kind: CorruptionKind, magnitude: f64 },
    /// Coordinatewise-uniform draws from an axis-aligned box.
    UniformBox { lows: Vec<f64>, highs: Vec<f64> },
}

impl<F: Real> ContextDistribution<F> {
    pub fn validate(&self) -> Result<()> {
        match self {
            ContextDistribution::Pool { inputs }
            | ContextDistribution::CorruptedPool { inputs, .. } => {
                if inputs.rank() != 2 || inputs.shape()[0] == 0 {
                    return Err(Error::InvalidArgument(
                        "context pool must be a non-empty rank-2 tensor".into(),
                    ));
                }
            }
            ContextDistribution::UniformBox { lows, highs } => {
                if lows.is_empty() || lows.len() != highs.len() {
                    return Err(Error::InvalidArgument(
                        "uniform box needs matching non-empty bounds".into(),
                    ));
                }
                if lows.iter().zip(highs).any(|(l, h)| !(l < h)) {
                    return Err(Error::InvalidArgument(
                        "uniform box needs low < high in every coordinate".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            ContextDistribution::Pool { inputs }
            | ContextDistribution::CorruptedPool { inputs, .. } => inputs.shape()[1],
            ContextDistribution::UniformBox { lows, .. } => lows.len(),
        }
    }
}

/// Draws a context batch of `m` rows. Pool draws are without replacement
/// while the pool is large enough, and fall back to with-replacement
/// draws when `m` exceeds the pool.
pub fn sample_context<F: Real>(
    dist: &ContextDistribution<F>,
    m: usize,
    seed: u64,
) -> Result<Tensor<F>> {
    dist.validate()?;
    if m == 0 {
        return Err(Error::InvalidArgument("context batch size must be positive".into()));
    }
    let mut rng = rng_from_seed(seed);
    let draw_rows = |inputs: &Tensor<F>, rng: &mut rand_chacha::ChaCha8Rng| -> Tensor<F> {
        let n = inputs.shape()[0];
        let d = inputs.shape()[1];
        let indices: Vec<usize> = if m <= n {
            sample_without_replacement(rng, n, m).into_iter().collect()
        } else {
            (0..m).map(|_| rng.random_range(0..n)).collect()
        };
        let mut data = Vec::with_capacity(m * d);
        for i in indices {
            data.extend_from_slice(inputs.row(i));
        }
        Tensor::from_vec(vec![m, d], data).expect("rows share the pool width")
    };
    match dist {
        ContextDistribution::Pool { inputs } => Ok(draw_rows(inputs, &mut rng)),
        ContextDistribution::CorruptedPool { inputs, kind, magnitude } => {
            let base = draw_rows(inputs, &mut rng);
            let mut crng = rng_from_seed(derive_seed(seed, streams::CORRUPT, 0));
            apply_corruption(&base, *kind, *magnitude, &mut crng)
        }
        ContextDistribution::UniformBox { lows, highs } => {
            let d = lows.len();
            let mut data = Vec::with_capacity(m * d);
            for _ in 0..m {
                for (l, h) in lows.iter().zip(highs.iter()) {
                    data.push(uniform::<F, _>(&mut rng, *l, *h));
                }
            }
            Tensor::from_vec(vec![m, d], data)
        }
    }
}

/// Seeded random partition of `0..n` into batches of `batch_size` (the
/// last batch may be short). Every index appears exactly once.
pub fn minibatch_indices(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut rng = rng_from_seed(seed);
    let perm: Vec<usize> = sample_without_replacement(&mut rng, n, n).into_iter().collect();
    Ok(perm.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Axis-aligned bounding box of a point set, padded by `margin` on every
/// side. Handy for deriving uniform-box context bounds from a dataset.
pub fn bounding_box<F: Real>(inputs: &Tensor<F>, margin: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if inputs.rank() != 2 || inputs.shape()[0] == 0 {
        return Err(Error::InvalidArgument(
            "bounding box needs a non-empty rank-2 tensor".into(),
        ));
    }
    let (n, d) = (inputs.shape()[0], inputs.shape()[1]);
    let mut lows = vec![f64::INFINITY; d];
    let mut highs = vec![f64::NEG_INFINITY; d];
    for i in 0..n {
        for j in 0..d {
            let v = to_f64(inputs.at(i, j));
            lows[j] = lows[j].min(v);
            highs[j] = highs[j].max(v);
        }
    }
    for j in 0..d {
        lows[j] -= margin;
        highs[j] += margin;
    }
    Ok((lows, highs))
}
