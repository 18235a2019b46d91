//! Training objectives and the gradient-descent loop.
//!
//! Three objectives share one loop:
//!
//! * `ps-map` — maximum a posteriori under a parameter-space Gaussian
//!   prior: scaled cross-entropy plus weight decay.
//! * `eb-map` — maximum a posteriori under the function-space prior: the
//!   data term minus the context regularizer from [`crate::prior`].
//! * `eb-vi` — the variational form: a (possibly perturbed) likelihood
//!   average plus a Monte Carlo divergence estimate. With zero
//!   perturbation noise and single-sample estimators it reproduces
//!   `eb-map` exactly, bit for bit.
//!
//! Minibatch data terms are scaled by `N/B` so every objective estimates
//! the full-dataset log-likelihood regardless of batch size.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{minibatch_indices, sample_context, ContextDistribution, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, nll, PredictionSet};
use crate::model::{FeatureSnapshot, MlpConfig, ModelParams, Provenance};
use crate::num::{derive_seed, real, streams, to_f64, Real};
use crate::prior::{kernel_from_snapshot, regularizer_var, PriorConfig};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Which loss the loop minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    PsMap,
    EbMap,
    EbVi,
}

/// How the regularizer is weighted against the scaled data term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizerScaling {
    /// Apply the regularizer once per step (the objective as written).
    #[default]
    PerStep,
    /// Multiply the regularizer by `N/B`, matching the data term's
    /// minibatch scaling.
    PerDatum,
}

fn default_momentum() -> f64 {
    0.9
}

fn one() -> usize {
    1
}

/// Optimization settings shared by all objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Fraction of the base rate the cosine schedule decays to.
    #[serde(default)]
    pub cosine_floor: f64,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub regularizer_scaling: RegularizerScaling,
    /// Likelihood perturbation samples (the `S` of the variational
    /// objective); ignored by the MAP objectives.
    #[serde(default = "one")]
    pub likelihood_samples: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be non-negative and finite, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(0.0..=1.0).contains(&self.cosine_floor) {
            return Err(Error::InvalidArgument(format!(
                "cosine_floor must be in [0, 1], got {}",
                self.cosine_floor
            )));
        }
        if self.likelihood_samples == 0 {
            return Err(Error::InvalidArgument("likelihood_samples must be positive".into()));
        }
        self.prior.validate()
    }
}

/// Differentiable pieces of one step's loss. In exact arithmetic
/// `total = data_term + function_penalty + parameter_penalty` (with a
/// missing penalty counting as zero).
#[derive(Debug, Clone)]
pub struct LossTerms<F: Real> {
    pub total: Var<F>,
    pub data_term: Var<F>,
    pub function_penalty: Option<Var<F>>,
    pub parameter_penalty: Var<F>,
}

/// Scalar snapshot of [`LossTerms`] for histories and error messages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub data_term: f64,
    pub function_penalty: f64,
    pub parameter_penalty: f64,
}

impl<F: Real> LossTerms<F> {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            total: to_f64(self.total.item()?),
            data_term: to_f64(self.data_term.item()?),
            function_penalty: match &self.function_penalty {
                Some(v) => to_f64(v.item()?),
                None => 0.0,
            },
            parameter_penalty: to_f64(self.parameter_penalty.item()?),
        })
    }
}

fn check_batch<F: Real>(inputs: &Tensor<F>, labels: &[usize], n_train: usize) -> Result<()> {
    if inputs.rank() != 2 || inputs.shape()[0] == 0 {
        return Err(Error::ShapeMismatch {
            op: "loss",
            details: format!("batch inputs must be a non-empty N×D matrix, got {:?}", inputs.shape()),
        });
    }
    if inputs.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            details: format!("{} inputs vs {} labels", inputs.shape()[0], labels.len()),
        });
    }
    if n_train < labels.len() {
        return Err(Error::InvalidArgument(format!(
            "n_train {} is smaller than the batch {}",
            n_train,
            labels.len()
        )));
    }
    Ok(())
}

/// Parameter-space MAP loss on one batch:
/// `(N/B)·Σ cross-entropy + (τ_θ/2)·‖θ‖²`.
pub fn ps_map_loss<F: Real>(
    tape: &Tape<F>,
    params: &ModelParams<F>,
    inputs: &Tensor<F>,
    labels: &[usize],
    n_train: usize,
    tau_theta: f64,
) -> Result<LossTerms<F>> {
    check_batch(inputs, labels, n_train)?;
    let live = params.register(tape)?;
    let xv = tape.constant(inputs.clone())?;
    let ce = live.cross_entropy_sum_var(&xv, labels)?;
    let data_term = ce.scale(real(n_train as f64 / labels.len() as f64))?;
    let parameter_penalty = live.squared_norm_var()?.scale(real(tau_theta / 2.0))?;
    let total = data_term.add(&parameter_penalty)?;
    Ok(LossTerms { total, data_term, function_penalty: None, parameter_penalty })
}

fn regularizer_factor(scaling: RegularizerScaling, n_train: usize, batch: usize) -> f64 {
    match scaling {
        RegularizerScaling::PerStep => 1.0,
        RegularizerScaling::PerDatum => n_train as f64 / batch as f64,
    }
}

/// Function-space MAP loss on one batch and one explicit context batch:
/// `(N/B)·Σ cross-entropy − total(θ, x̂)` where `total` is the context
/// regularizer.
#[allow(clippy::too_many_arguments)]
pub fn eb_map_loss<F: Real>(
    tape: &Tape<F>,
    params: &ModelParams<F>,
    inputs: &Tensor<F>,
    labels: &[usize],
    n_train: usize,
    snapshot: &FeatureSnapshot<F>,
    context_inputs: &Tensor<F>,
    prior: &PriorConfig,
    scaling: RegularizerScaling,
) -> Result<LossTerms<F>> {
    check_batch(inputs, labels, n_train)?;
    let live = params.register(tape)?;
    let xv = tape.constant(inputs.clone())?;
    let ce = live.cross_entropy_sum_var(&xv, labels)?;
    let data_term = ce.scale(real(n_train as f64 / labels.len() as f64))?;

    let kernel = kernel_from_snapshot(snapshot, context_inputs)?;
    let ctx = tape.constant(context_inputs.clone())?;
    let terms = regularizer_var(&live, &ctx, &kernel, real(prior.tau_f), real(prior.tau_theta))?;
    let factor: F = real(regularizer_factor(scaling, n_train, labels.len()));
    let total = data_term.sub(&terms.total.scale(factor)?)?;
    Ok(LossTerms {
        total,
        data_term,
        function_penalty: Some(terms.function_penalty.scale(factor)?),
        parameter_penalty: terms.parameter_penalty.scale(factor)?,
    })
}

/// Variational loss on one batch:
///
/// ```text
/// (N/B)·(1/S)·Σ_s Σ_b CE(θ + σε⁽ˢ⁾)  −  (1/(I·J))·Σ_i Σ_j total(θ + σε⁽ʲ⁾, X̂⁽ⁱ⁾)
/// ```
///
/// Context batches, likelihood perturbations, and divergence
/// perturbations are drawn from three independent streams derived from
/// `seed`, so `σ = 0` single-sample settings replay exactly the context
/// draws of [`eb_map_loss`] with the same seed.
#[allow(clippy::too_many_arguments)]
pub fn eb_vi_loss<F: Real>(
    tape: &Tape<F>,
    params: &ModelParams<F>,
    inputs: &Tensor<F>,
    labels: &[usize],
    n_train: usize,
    snapshot: &FeatureSnapshot<F>,
    context: &ContextDistribution<F>,
    prior: &PriorConfig,
    likelihood_samples: usize,
    scaling: RegularizerScaling,
    seed: u64,
) -> Result<LossTerms<F>> {
    check_batch(inputs, labels, n_train)?;
    prior.validate()?;
    if likelihood_samples == 0 {
        return Err(Error::InvalidArgument("likelihood_samples must be positive".into()));
    }
    let sigma: F = real(prior.sigma);
    let xv = tape.constant(inputs.clone())?;

    // Likelihood side: average the batch cross-entropy over S perturbed
    // copies of the parameters.
    let mut ce_sum: Option<Var<F>> = None;
    for s in 0..likelihood_samples {
        let live = if prior.sigma == 0.0 {
            params.register(tape)?
        } else {
            let eps =
                params.sample_perturbation(derive_seed(seed, streams::PERTURB_LIK, s as u64));
            params.register_perturbed(tape, sigma, &eps)?
        };
        let ce = live.cross_entropy_sum_var(&xv, labels)?;
        ce_sum = Some(match ce_sum {
            Some(acc) => acc.add(&ce)?,
            None => ce,
        });
    }
    let ce_mean = ce_sum
        .expect("at least one likelihood sample")
        .scale(real(1.0 / likelihood_samples as f64))?;
    let data_term = ce_mean.scale(real(n_train as f64 / labels.len() as f64))?;

    // Divergence side: one context batch per i, one parameter
    // perturbation per j, regularizer on every (i, j) pair.
    let i_count = prior.mc_context_samples;
    let j_count = prior.mc_param_samples;
    let mut contexts = Vec::with_capacity(i_count);
    for i in 0..i_count {
        let ctx = sample_context(
            context,
            prior.context_batch_size,
            derive_seed(seed, streams::CONTEXT, i as u64),
        )?;
        let kernel = kernel_from_snapshot(snapshot, &ctx)?;
        contexts.push((tape.constant(ctx)?, kernel));
    }

    let mut total_sum: Option<Var<F>> = None;
    let mut fn_sum: Option<Var<F>> = None;
    let mut param_sum: Option<Var<F>> = None;
    for j in 0..j_count {
        let live = if prior.sigma == 0.0 {
            params.register(tape)?
        } else {
            let eps = params.sample_perturbation(derive_seed(seed, streams::PERTURB, j as u64));
            params.register_perturbed(tape, sigma, &eps)?
        };
        for (ctx, kernel) in &contexts {
            let terms =
                regularizer_var(&live, ctx, kernel, real(prior.tau_f), real(prior.tau_theta))?;
            let fold = |acc: Option<Var<F>>, v: Var<F>| -> Result<Option<Var<F>>> {
                Ok(Some(match acc {
                    Some(a) => a.add(&v)?,
                    None => v,
                }))
            };
            total_sum = fold(total_sum, terms.total)?;
            fn_sum = fold(fn_sum, terms.function_penalty)?;
            param_sum = fold(param_sum, terms.parameter_penalty)?;
        }
    }
    let pairs = (i_count * j_count) as f64;
    let factor: F = real(regularizer_factor(scaling, n_train, labels.len()));
    let divergence = total_sum
        .expect("at least one estimator sample")
        .scale(real(-1.0 / pairs))?
        .scale(factor)?;
    let total = data_term.add(&divergence)?;
    Ok(LossTerms {
        total,
        data_term,
        function_penalty: Some(
            fn_sum.expect("estimator ran").scale(real(1.0 / pairs))?.scale(factor)?,
        ),
        parameter_penalty: param_sum
            .expect("estimator ran")
            .scale(real(1.0 / pairs))?
            .scale(factor)?,
    })
}

/// Cosine learning-rate schedule from `base` down to
/// `base·floor_fraction` over `total_steps`.
pub fn cosine_lr(base: f64, floor_fraction: f64, step: usize, total_steps: usize) -> f64 {
    let t = step.min(total_steps) as f64;
    let horizon = total_steps.max(1) as f64;
    let cos_term = 0.5 * (1.0 + (std::f64::consts::PI * t / horizon).cos());
    base * (floor_fraction + (1.0 - floor_fraction) * cos_term)
}

/// Stochastic gradient descent with classical momentum:
/// `v ← m·v + g`, `θ ← θ − η·v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum<F: Real> {
    momentum: F,
    velocity: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> SgdMomentum<F> {
    pub fn new(momentum: f64) -> Self {
        Self { momentum: real(momentum), velocity: BTreeMap::new() }
    }

    pub fn step(
        &mut self,
        params: &mut ModelParams<F>,
        grads: &Gradients<F>,
        learning_rate: F,
    ) -> Result<()> {
        for (name, tensor) in params.named_tensors_mut() {
            let g = grads.get(&name);
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(tensor.shape().to_vec()));
            for (i, vi) in v.data_mut().iter_mut().enumerate() {
                let gi = g.map(|t| t.data()[i]).unwrap_or_else(F::zero);
                *vi = self.momentum * *vi + gi;
                tensor.data_mut()[i] -= learning_rate * *vi;
            }
        }
        Ok(())
    }
}

/// Per-epoch summary of the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_data_term: f64,
    pub mean_function_penalty: f64,
    pub mean_parameter_penalty: f64,
    /// Learning rate at the last step of the epoch.
    pub final_learning_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_nll: Option<f64>,
}

/// One optimization step's loss pieces, schedule position, and cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub learning_rate: f64,
    /// Wall-clock cost of the step. Excluded from serialized output so
    /// that result files stay byte-reproducible.
    #[serde(skip)]
    pub wall_ms: f64,
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainResult<F: Real> {
    pub params: ModelParams<F>,
    /// The frozen feature map that built the context kernels.
    pub feature_snapshot: FeatureSnapshot<F>,
    pub history: Vec<EpochRecord>,
    /// Every step's loss components, in order.
    pub steps: Vec<StepRecord>,
}

/// Runs the training loop. `context` is required by the function-space
/// objectives and ignored by `ps-map`; `feature_snapshot` defaults to a
/// snapshot of the freshly initialized parameters.
pub fn train<F: Real>(
    model_config: &MlpConfig,
    train_config: &TrainConfig,
    data: &Dataset<F>,
    context: Option<&ContextDistribution<F>>,
    feature_snapshot: Option<FeatureSnapshot<F>>,
    validation: Option<&Dataset<F>>,
    seed: u64,
) -> Result<TrainResult<F>> {
    model_config.validate()?;
    train_config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if data.dim() != model_config.input_dim {
        return Err(Error::InvalidArgument(format!(
            "data dimension {} does not match model input {}",
            data.dim(),
            model_config.input_dim
        )));
    }
    if data.num_classes != model_config.output_dim {
        return Err(Error::InvalidArgument(format!(
            "{} classes but {} model outputs",
            data.num_classes, model_config.output_dim
        )));
    }
    let needs_context = matches!(train_config.objective, Objective::EbMap | Objective::EbVi);
    let context = match (needs_context, context) {
        (true, None) => {
            return Err(Error::InvalidArgument(
                "function-space objectives need a context distribution".into(),
            ))
        }
        (true, Some(c)) => {
            c.validate()?;
            if c.dim() != model_config.input_dim {
                return Err(Error::InvalidArgument(format!(
                    "context dimension {} does not match model input {}",
                    c.dim(),
                    model_config.input_dim
                )));
            }
            Some(c)
        }
        (false, _) => None,
    };

    let mut params = ModelParams::init(model_config, derive_seed(seed, streams::INIT, 0))?;
    let snapshot =
        feature_snapshot.unwrap_or_else(|| params.snapshot(Provenance::RandomInit));
    if needs_context && snapshot.feature_dim() != model_config.feature_dim() {
        return Err(Error::InvalidArgument(format!(
            "feature snapshot width {} does not match model feature width {}",
            snapshot.feature_dim(),
            model_config.feature_dim()
        )));
    }

    let n = data.len();
    let steps_per_epoch = n.div_ceil(train_config.batch_size);
    let total_steps = train_config.epochs * steps_per_epoch;
    let mut optimizer = SgdMomentum::new(train_config.momentum);
    let mut history = Vec::with_capacity(train_config.epochs);
    let mut steps_log = Vec::with_capacity(total_steps);
    let mut global_step = 0usize;

    for epoch in 0..train_config.epochs {
        let batches = minibatch_indices(
            n,
            train_config.batch_size,
            derive_seed(seed, streams::MINIBATCH, epoch as u64),
        )?;
        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut last_lr = train_config.learning_rate;
        for batch in &batches {
            let step_started = std::time::Instant::now();
            let step_seed = derive_seed(seed, streams::STEP, global_step as u64);
            let lr = cosine_lr(
                train_config.learning_rate,
                train_config.cosine_floor,
                global_step,
                total_steps,
            );
            last_lr = lr;
            let (inputs, labels) = data.gather(batch);

            let tape = Tape::new();
            let terms = match train_config.objective {
                Objective::PsMap => ps_map_loss(
                    &tape,
                    &params,
                    &inputs,
                    &labels,
                    n,
                    train_config.prior.tau_theta,
                )?,
                Objective::EbMap => {
                    let ctx = sample_context(
                        context.expect("checked above"),
                        train_config.prior.context_batch_size,
                        derive_seed(step_seed, streams::CONTEXT, 0),
                    )?;
                    eb_map_loss(
                        &tape,
                        &params,
                        &inputs,
                        &labels,
                        n,
                        &snapshot,
                        &ctx,
                        &train_config.prior,
                        train_config.regularizer_scaling,
                    )?
                }
                Objective::EbVi => eb_vi_loss(
                    &tape,
                    &params,
                    &inputs,
                    &labels,
                    n,
                    &snapshot,
                    context.expect("checked above"),
                    &train_config.prior,
                    train_config.likelihood_samples,
                    train_config.regularizer_scaling,
                    step_seed,
                )?,
            };

            let breakdown = terms.breakdown()?;
            if !breakdown.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at step {} (data {}, function penalty {}, parameter penalty {})",
                    global_step,
                    breakdown.data_term,
                    breakdown.function_penalty,
                    breakdown.parameter_penalty
                )));
            }
            let grads = tape.backward(&terms.total)?;
            optimizer.step(&mut params, &grads, real(lr))?;

            sums.0 += breakdown.total;
            sums.1 += breakdown.data_term;
            sums.2 += breakdown.function_penalty;
            sums.3 += breakdown.parameter_penalty;
            steps_log.push(StepRecord {
                step: global_step,
                loss: breakdown,
                learning_rate: lr,
                wall_ms: step_started.elapsed().as_secs_f64() * 1e3,
            });
            global_step += 1;
        }

        let steps = batches.len() as f64;
        let (val_accuracy, val_nll) = match validation {
            Some(val) => {
                let probs = params.predict_proba(&val.inputs)?;
                let ps = PredictionSet::new(probs, val.labels.clone())?;
                (Some(accuracy(&ps)), Some(nll(&ps)))
            }
            None => (None, None),
        };
        history.push(EpochRecord {
            epoch,
            mean_total: sums.0 / steps,
            mean_data_term: sums.1 / steps,
            mean_function_penalty: sums.2 / steps,
            mean_parameter_penalty: sums.3 / steps,
            final_learning_rate: last_lr,
            val_accuracy,
            val_nll,
        });
    }

    Ok(TrainResult { params, feature_snapshot: snapshot, history, steps: steps_log })
}

/// Uniformly averaged predictive distribution of an ensemble. A
/// single-member ensemble reproduces that member's softmax exactly.
pub fn ensemble_predict<F: Real>(
    members: &[ModelParams<F>],
    inputs: &Tensor<F>,
) -> Result<Tensor<F>> {
    if members.is_empty() {
        return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
    }
    let mut sum: Option<Tensor<F>> = None;
    for member in members {
        let p = member.predict_proba(inputs)?;
        sum = Some(match sum {
            Some(acc) => acc.add(&p)?,
            None => p,
        });
    }
    Ok(sum.expect("non-empty ensemble").scale(real(1.0 / members.len() as f64)))
}
