//! Evaluation metrics over categorical predictive distributions:
//! accuracy, negative log-likelihood, calibration error, predictive
//! entropy, selective-prediction area, and a rank-based AUROC for
//! distribution-shift detection.
//!
//! All metrics are computed and reported in `f64` regardless of the
//! model's working precision.

use std::io::Write as IoWrite;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::num::{real, to_f64, Real};
use crate::tensor::Tensor;

/// Default number of confidence bins for the calibration error.
pub const DEFAULT_ECE_BINS: usize = 15;

/// A batch of categorical predictive distributions with ground-truth
/// labels. Construction validates that rows are probability vectors.
#[derive(Debug, Clone)]
pub struct PredictionSet<F: Real> {
    probs: Tensor<F>,
    labels: Vec<usize>,
}

impl<F: Real> PredictionSet<F> {
    pub fn new(probs: Tensor<F>, labels: Vec<usize>) -> Result<Self> {
        if probs.rank() != 2 || probs.shape()[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "prediction_set",
                details: format!("probabilities must be a non-empty N×K matrix, got {:?}", probs.shape()),
            });
        }
        let (n, k) = (probs.shape()[0], probs.shape()[1]);
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "prediction_set",
                details: format!("{} rows but {} labels", n, labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {} classes",
                bad, k
            )));
        }
        // Tolerance scales with the working precision so reduced-precision
        // softmax outputs still validate.
        let tol = real::<F>(1e-9).max(F::epsilon() * real(100.0 * k as f64));
        for i in 0..n {
            let row = probs.row(i);
            if row.iter().any(|&p| p < F::zero() || !p.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "row {} contains a negative or non-finite probability",
                    i
                )));
            }
            let sum: F = row.iter().copied().sum();
            if (sum - F::one()).abs() > tol {
                return Err(Error::InvalidArgument(format!(
                    "row {} sums to {} instead of 1",
                    i, sum
                )));
            }
        }
        Ok(Self { probs, labels })
    }

    /// Builds the set by softmaxing raw logits.
    pub fn from_logits(logits: &Tensor<F>, labels: Vec<usize>) -> Result<Self> {
        Self::new(crate::model::softmax_rows(logits)?, labels)
    }

    pub fn probs(&self) -> &Tensor<F> {
        &self.probs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.shape()[1]
    }

    fn predicted_class(&self, i: usize) -> usize {
        argmax_first(self.probs.row(i))
    }

    fn confidence(&self, i: usize) -> f64 {
        self.probs.row(i).iter().copied().fold(F::neg_infinity(), F::max).to_f64().unwrap()
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax_first<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of points whose most probable class is the label.
pub fn accuracy<F: Real>(ps: &PredictionSet<F>) -> f64 {
    let correct = (0..ps.len()).filter(|&i| ps.predicted_class(i) == ps.labels[i]).count();
    correct as f64 / ps.len() as f64
}

/// Mean negative log-likelihood of the labels, in nats. A zero
/// probability on a true label honestly yields infinity.
pub fn nll<F: Real>(ps: &PredictionSet<F>) -> f64 {
    let total: f64 =
        (0..ps.len()).map(|i| -to_f64(ps.probs.at(i, ps.labels[i])).ln()).sum();
    total / ps.len() as f64
}

/// Shannon entropy of one categorical distribution, in nats, with the
/// `0·ln 0 = 0` convention.
pub fn entropy_nats<F: Real>(row: &[F]) -> f64 {
    row.iter()
        .map(|&p| {
            let p = to_f64(p);
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum()
}

/// Mean predictive entropy over the set, in nats.
pub fn mean_entropy<F: Real>(ps: &PredictionSet<F>) -> f64 {
    let total: f64 = (0..ps.len()).map(|i| entropy_nats(ps.probs.row(i))).sum();
    total / ps.len() as f64
}

/// Mean top-class probability over the set.
pub fn mean_confidence<F: Real>(ps: &PredictionSet<F>) -> f64 {
    let total: f64 = (0..ps.len()).map(|i| ps.confidence(i)).sum();
    total / ps.len() as f64
}

/// Occupancy, mean confidence, and accuracy of one calibration bin.
/// Empty bins report zeros.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

/// Calibration bin table over equal-width confidence bins on (0, 1]:
/// bin `b` covers `(b/m, (b+1)/m]`.
pub fn ece_bin_table<F: Real>(ps: &PredictionSet<F>, m_bins: usize) -> Result<Vec<BinStat>> {
    if m_bins == 0 {
        return Err(Error::InvalidArgument("ece needs at least one bin".into()));
    }
    let mut count = vec![0usize; m_bins];
    let mut conf_sum = vec![0.0f64; m_bins];
    let mut acc_sum = vec![0.0f64; m_bins];
    for i in 0..ps.len() {
        let conf = ps.confidence(i);
        // Right-closed bins: ceil(conf·m) − 1, clamped for conf == 0.
        let raw = (conf * m_bins as f64).ceil() as isize - 1;
        let b = raw.clamp(0, m_bins as isize - 1) as usize;
        count[b] += 1;
        conf_sum[b] += conf;
        acc_sum[b] += if ps.predicted_class(i) == ps.labels[i] { 1.0 } else { 0.0 };
    }
    Ok((0..m_bins)
        .map(|b| {
            if count[b] == 0 {
                BinStat { count: 0, mean_confidence: 0.0, accuracy: 0.0 }
            } else {
                let c = count[b] as f64;
                BinStat {
                    count: count[b],
                    mean_confidence: conf_sum[b] / c,
                    accuracy: acc_sum[b] / c,
                }
            }
        })
        .collect())
}

/// Expected calibration error: the count-weighted mean over occupied
/// bins of |accuracy − confidence|, with bins as in [`ece_bin_table`].
pub fn ece<F: Real>(ps: &PredictionSet<F>, m_bins: usize) -> Result<f64> {
    let table = ece_bin_table(ps, m_bins)?;
    let n = ps.len() as f64;
    Ok(table
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| (b.count as f64 / n) * (b.accuracy - b.mean_confidence).abs())
        .sum())
}

/// One point of the selective-prediction accuracy/coverage curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub coverage: f64,
    pub accuracy: f64,
}

/// Indices ranked most-confident first, ties broken by original index.
fn confidence_ranking<F: Real>(ps: &PredictionSet<F>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ps.len()).collect();
    order.sort_by(|&a, &b| {
        ps.confidence(b).total_cmp(&ps.confidence(a)).then(a.cmp(&b))
    });
    order
}

/// Selective-prediction curve: at coverage `k/N` the model answers only
/// on the `k` most confident points, and the point records the accuracy
/// over that kept set. The final point's accuracy equals the overall
/// accuracy.
pub fn selective_curve<F: Real>(ps: &PredictionSet<F>) -> Vec<CurvePoint> {
    let order = confidence_ranking(ps);
    let n = ps.len();
    let mut correct_so_far = 0usize;
    order
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            if ps.predicted_class(i) == ps.labels[i] {
                correct_so_far += 1;
            }
            CurvePoint {
                coverage: (k + 1) as f64 / n as f64,
                accuracy: correct_so_far as f64 / (k + 1) as f64,
            }
        })
        .collect()
}

/// Area under the selective-prediction accuracy/coverage curve: the
/// mean of the curve's accuracies over the `N` coverage levels.
pub fn selective_accuracy_auc<F: Real>(ps: &PredictionSet<F>) -> f64 {
    let order = confidence_ranking(ps);
    let mut correct_so_far = 0usize;
    let mut acc_total = 0.0f64;
    for (k, &i) in order.iter().enumerate() {
        if ps.predicted_class(i) == ps.labels[i] {
            correct_so_far += 1;
        }
        acc_total += correct_so_far as f64 / (k + 1) as f64;
    }
    acc_total / ps.len() as f64
}

/// Area under the ROC curve for separating `positive` from `negative`
/// scores, computed with the midrank form of the rank-sum statistic so
/// that ties contribute one half. Equals P(pos > neg) + ½·P(pos = neg).
pub fn auroc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::InvalidArgument(
            "auroc needs at least one score in each group".into(),
        ));
    }
    if positive.iter().chain(negative.iter()).any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("auroc scores must not be NaN".into()));
    }
    // Pool the scores, sort, and assign midranks to tied runs.
    let np = positive.len();
    let nn = negative.len();
    let mut pooled: Vec<(f64, bool)> = positive
        .iter()
        .map(|&s| (s, true))
        .chain(negative.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // Ranks are 1-based; a tied run [i, j] shares the midrank.
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for item in &pooled[i..=j] {
            if item.1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (np * (np + 1)) as f64 / 2.0;
    Ok(u / (np as f64 * nn as f64))
}

/// Flat summary of the standard metrics over one prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
    pub mean_confidence: f64,
    pub mean_entropy: f64,
    pub selective_auc: f64,
    /// Entropy-score AUROC against a shifted set; filled by callers that
    /// evaluate one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ood_auroc: Option<f64>,
    /// Inputs needed to recompute the ECE.
    pub bin_table: Vec<BinStat>,
    /// Inputs needed to recompute the selective-prediction area.
    pub curve_points: Vec<CurvePoint>,
}

/// Computes every in-distribution metric at once.
pub fn evaluate<F: Real>(ps: &PredictionSet<F>, m_bins: usize) -> Result<MetricsReport> {
    Ok(MetricsReport {
        accuracy: accuracy(ps),
        nll: nll(ps),
        ece: ece(ps, m_bins)?,
        mean_confidence: mean_confidence(ps),
        mean_entropy: mean_entropy(ps),
        selective_auc: selective_accuracy_auc(ps),
        ood_auroc: None,
        bin_table: ece_bin_table(ps, m_bins)?,
        curve_points: selective_curve(ps),
    })
}

/// AUROC for flagging shifted inputs by predictive entropy: higher
/// entropy should indicate the shifted set.
pub fn entropy_ood_auroc<F: Real>(
    in_distribution: &PredictionSet<F>,
    shifted: &PredictionSet<F>,
) -> Result<f64> {
    let id: Vec<f64> =
        (0..in_distribution.len()).map(|i| entropy_nats(in_distribution.probs.row(i))).collect();
    let ood: Vec<f64> = (0..shifted.len()).map(|i| entropy_nats(shifted.probs.row(i))).collect();
    auroc(&ood, &id)
}

/// Rectangular evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lows: Vec<f64>,
    pub highs: Vec<f64>,
    pub steps: Vec<usize>,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lows.is_empty()
            || self.lows.len() != self.highs.len()
            || self.lows.len() != self.steps.len()
        {
            return Err(Error::InvalidArgument(
                "grid needs matching non-empty lows/highs/steps".into(),
            ));
        }
        if self.lows.iter().zip(&self.highs).any(|(l, h)| !(l < h)) {
            return Err(Error::InvalidArgument("grid needs low < high per axis".into()));
        }
        if self.steps.iter().any(|&s| s < 2) {
            return Err(Error::InvalidArgument("grid needs at least 2 steps per axis".into()));
        }
        Ok(())
    }

    pub fn num_points(&self) -> usize {
        self.steps.iter().product()
    }

    /// Materializes the grid, last axis varying fastest.
    pub fn points<F: Real>(&self) -> Result<Tensor<F>> {
        self.validate()?;
        let d = self.lows.len();
        let n = self.num_points();
        let mut data: Vec<F> = Vec::with_capacity(n * d);
        let mut counters = vec![0usize; d];
        for _ in 0..n {
            for axis in 0..d {
                let t = counters[axis] as f64 / (self.steps[axis] - 1) as f64;
                data.push(real(self.lows[axis] + t * (self.highs[axis] - self.lows[axis])));
            }
            for axis in (0..d).rev() {
                counters[axis] += 1;
                if counters[axis] < self.steps[axis] {
                    break;
                }
                counters[axis] = 0;
            }
        }
        Tensor::from_vec(vec![n, d], data)
    }
}

/// Predictive entropy statistics split by distance to the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarFieldEntropy {
    /// Mean entropy over grid points farther than the radius from every
    /// training input; absent when no point qualifies.
    pub far_mean: Option<f64>,
    /// Mean entropy over the remaining (near) grid points.
    pub near_mean: Option<f64>,
    pub far_count: usize,
    pub near_count: usize,
}

/// Splits grid points by Euclidean distance to the nearest training
/// input and averages the model's predictive entropy in each region.
pub fn far_field_entropy<F: Real>(
    params: &ModelParams<F>,
    train_inputs: &Tensor<F>,
    grid_points: &Tensor<F>,
    radius: f64,
) -> Result<FarFieldEntropy> {
    if grid_points.rank() != 2 || train_inputs.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "far_field_entropy",
            details: "grid and training inputs must be rank 2".into(),
        });
    }
    if grid_points.shape()[1] != train_inputs.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "far_field_entropy",
            details: format!(
                "grid dim {} vs training dim {}",
                grid_points.shape()[1],
                train_inputs.shape()[1]
            ),
        });
    }
    let probs = params.predict_proba(grid_points)?;
    let (g, _d) = (grid_points.shape()[0], grid_points.shape()[1]);
    let n = train_inputs.shape()[0];
    let r2 = radius * radius;

    let mut far = (0usize, 0.0f64);
    let mut near = (0usize, 0.0f64);
    for i in 0..g {
        let gp = grid_points.row(i);
        let mut min_d2 = f64::INFINITY;
        for t in 0..n {
            let tp = train_inputs.row(t);
            let d2: f64 = gp
                .iter()
                .zip(tp.iter())
                .map(|(&a, &b)| {
                    let diff = to_f64(a) - to_f64(b);
                    diff * diff
                })
                .sum();
            if d2 < min_d2 {
                min_d2 = d2;
            }
        }
        let h = entropy_nats(probs.row(i));
        if min_d2 > r2 {
            far.0 += 1;
            far.1 += h;
        } else {
            near.0 += 1;
            near.1 += h;
        }
    }
    Ok(FarFieldEntropy {
        far_mean: (far.0 > 0).then(|| far.1 / far.0 as f64),
        near_mean: (near.0 > 0).then(|| near.1 / near.0 as f64),
        far_count: far.0,
        near_count: near.0,
    })
}

/// Writes per-grid-point predictions as CSV: the point's coordinates,
/// each class probability, and the predictive entropy.
pub fn emit_grid_predictions<F: Real>(
    params: &ModelParams<F>,
    grid: &GridSpec,
    out: &mut dyn IoWrite,
) -> Result<()> {
    let points = grid.points::<F>()?;
    let probs = params.predict_proba(&points)?;
    let d = points.shape()[1];
    let k = probs.shape()[1];

    let mut header: Vec<String> = (0..d).map(|j| format!("x{}", j)).collect();
    header.extend((0..k).map(|c| format!("p_class{}", c)));
    header.push("entropy".to_string());
    writeln!(out, "{}", header.join(","))?;

    for i in 0..points.shape()[0] {
        let mut fields: Vec<String> =
            points.row(i).iter().map(|&v| format!("{}", to_f64(v))).collect();
        fields.extend(probs.row(i).iter().map(|&p| format!("{}", to_f64(p))));
        fields.push(format!("{}", entropy_nats(probs.row(i))));
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}
