//! Function-space prior machinery: the context kernel, the regularizer it
//! induces on network outputs, and the Monte Carlo estimator of the
//! divergence term used by the variational objective.
//!
//! The kernel over a context batch `x̂₁..x̂_M` is built from a frozen
//! feature map `h(·; φ₀)`:
//!
//! ```text
//! K = H Hᵀ + I,   H[i, ·] = h(x̂_i; φ₀)
//! ```
//!
//! Adding the identity makes every eigenvalue at least one, so the factor
//! exists and the induced quadratic form is well conditioned regardless
//! of how degenerate the features are.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::data::{sample_context, ContextDistribution};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, solve_lower, solve_spd};
use crate::model::{FeatureSnapshot, LiveModel, ModelParams};
use crate::num::{derive_seed, real, streams, Real};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Hyperparameters of the function-space objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    /// Function-space precision. Larger values pull context outputs
    /// harder toward the prior.
    pub tau_f: f64,
    /// Parameter-space precision (weight-decay strength).
    pub tau_theta: f64,
    /// Context points drawn per estimator sample.
    pub context_batch_size: usize,
    /// Context batches averaged per step (the `I` of the estimator).
    #[serde(default = "one")]
    pub mc_context_samples: usize,
    /// Parameter perturbations averaged per step (the `J` of the
    /// estimator).
    #[serde(default = "one")]
    pub mc_param_samples: usize,
    /// Perturbation scale. Zero recovers the unperturbed objective
    /// exactly.
    #[serde(default)]
    pub sigma: f64,
}

fn one() -> usize {
    1
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            tau_f: 1.0,
            tau_theta: 1e-3,
            context_batch_size: 32,
            mc_context_samples: 1,
            mc_param_samples: 1,
            sigma: 0.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_f > 0.0) || !self.tau_f.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "tau_f must be positive and finite, got {}",
                self.tau_f
            )));
        }
        if !(self.tau_theta >= 0.0) || !self.tau_theta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "tau_theta must be non-negative and finite, got {}",
                self.tau_theta
            )));
        }
        if self.context_batch_size == 0 {
            return Err(Error::InvalidArgument("context_batch_size must be positive".into()));
        }
        if self.mc_context_samples == 0 || self.mc_param_samples == 0 {
            return Err(Error::InvalidArgument(
                "estimator sample counts must be positive".into(),
            ));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sigma must be non-negative and finite, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Factored context kernel `K = H Hᵀ + I` over one context batch.
#[derive(Debug, Clone)]
pub struct ContextKernel<F: Real> {
    matrix: Tensor<F>,
    chol: Rc<Tensor<F>>,
    jitter_added: f64,
}

impl<F: Real> ContextKernel<F> {
    /// Builds and factors the kernel from feature rows `H` (`M × d`).
    /// The identity shift keeps the matrix positive definite, so the
    /// jitter escalation below is a safety net, not the normal path.
    pub fn from_features(features: &Tensor<F>) -> Result<Self> {
        if features.rank() != 2 || features.shape()[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "context_kernel",
                details: format!("features must be a non-empty M×d matrix, got {:?}", features.shape()),
            });
        }
        if !features.all_finite() {
            return Err(Error::Numerical("context features contain non-finite values".into()));
        }
        let m = features.shape()[0];
        let gram = features.matmul_nt(features)?;
        let matrix = gram.add(&Tensor::eye(m))?;

        let mut jitter = 0.0f64;
        for attempt in 0..=20 {
            let shifted = if jitter == 0.0 {
                matrix.clone()
            } else {
                let mut s = matrix.clone();
                for i in 0..m {
                    *s.at_mut(i, i) = s.at(i, i) + real(jitter);
                }
                s
            };
            match cholesky_lower(&shifted) {
                Ok(chol) => {
                    return Ok(Self { matrix, chol: Rc::new(chol), jitter_added: jitter })
                }
                Err(_) if attempt < 20 => {
                    jitter = if jitter == 0.0 { 1e-10 } else { jitter * 2.0 };
                }
                Err(e) => return Err(e),
            }
        }
        unreachable!("loop always returns")
    }

    /// Number of context points the kernel covers.
    pub fn dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    /// The kernel matrix `H Hᵀ + I` itself (without any jitter).
    pub fn matrix(&self) -> &Tensor<F> {
        &self.matrix
    }

    /// Lower-triangular factor used by the quadratic form.
    pub fn cholesky(&self) -> &Rc<Tensor<F>> {
        &self.chol
    }

    /// Diagonal shift that was needed to factor the matrix (normally 0).
    pub fn jitter_added(&self) -> f64 {
        self.jitter_added
    }

    /// `vᵀ K⁻¹ v` computed through the factor.
    pub fn mahalanobis_sq(&self, v: &[F]) -> Result<F> {
        let w = solve_lower(&self.chol, v)?;
        Ok(w.iter().map(|&x| x * x).sum())
    }

    /// `K⁻¹ v` computed through the factor.
    pub fn solve(&self, v: &[F]) -> Result<Vec<F>> {
        solve_spd(&self.chol, v)
    }
}

/// Builds the kernel for a context batch under a frozen feature map.
pub fn kernel_from_snapshot<F: Real>(
    snapshot: &FeatureSnapshot<F>,
    context_inputs: &Tensor<F>,
) -> Result<ContextKernel<F>> {
    ContextKernel::from_features(&snapshot.features(context_inputs)?)
}

/// The differentiable pieces of the regularizer on one context batch.
/// `total` is the regularizer itself (a log-density, so typically
/// negative); the penalties are its two non-negative components:
///
/// ```text
/// total = −(function_penalty + parameter_penalty)
/// function_penalty  = (τ_f/2) · Σ_k f_kᵀ K⁻¹ f_k
/// parameter_penalty = (τ_θ/2) · ‖θ‖²
/// ```
///
/// where `f_k` is the network's class-`k` output over the context batch.
#[derive(Debug, Clone)]
pub struct RegularizerTerms<F: Real> {
    pub total: Var<F>,
    pub function_penalty: Var<F>,
    pub parameter_penalty: Var<F>,
}

/// Records the regularizer for a live (tape-registered) model on a
/// context batch already registered as a constant.
pub fn regularizer_var<F: Real>(
    live: &LiveModel<F>,
    context_inputs: &Var<F>,
    kernel: &ContextKernel<F>,
    tau_f: F,
    tau_theta: F,
) -> Result<RegularizerTerms<F>> {
    let logits = live.logits_var(context_inputs)?;
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != kernel.dim() {
        return Err(Error::ShapeMismatch {
            op: "regularizer",
            details: format!(
                "context outputs {:?} do not match a {}-point kernel",
                shape,
                kernel.dim()
            ),
        });
    }
    let num_classes = shape[1];
    let tape = context_inputs.tape().clone();

    // Σ_k f_kᵀ K⁻¹ f_k, one column at a time. Columns are extracted by
    // multiplying with a one-hot selector so the whole computation stays
    // inside the recorded operation set.
    let mut quad_sum: Option<Var<F>> = None;
    for k in 0..num_classes {
        let mut selector = Tensor::zeros(vec![num_classes]);
        selector.data_mut()[k] = F::one();
        let column = logits.matmul(&tape.constant(selector)?)?;
        let quad = column.quad_form_fixed(Rc::clone(kernel.cholesky()))?;
        quad_sum = Some(match quad_sum {
            Some(s) => s.add(&quad)?,
            None => quad,
        });
    }
    let half = real::<F>(0.5);
    let function_penalty =
        quad_sum.expect("at least one output class").scale(tau_f * half)?;
    let parameter_penalty = live.squared_norm_var()?.scale(tau_theta * half)?;
    let total = function_penalty.add(&parameter_penalty)?.scale(-F::one())?;
    Ok(RegularizerTerms { total, function_penalty, parameter_penalty })
}

/// Value of the regularizer at `params` for one explicit context batch.
/// Thin wrapper over [`regularizer_var`] so there is a single source of
/// truth for the arithmetic.
pub fn eb_regularizer<F: Real>(
    params: &ModelParams<F>,
    snapshot: &FeatureSnapshot<F>,
    context_inputs: &Tensor<F>,
    tau_f: f64,
    tau_theta: f64,
) -> Result<F> {
    let kernel = kernel_from_snapshot(snapshot, context_inputs)?;
    let tape = Tape::new();
    let live = params.register(&tape)?;
    let ctx = tape.constant(context_inputs.clone())?;
    let terms = regularizer_var(&live, &ctx, &kernel, real(tau_f), real(tau_theta))?;
    terms.total.item()
}

/// Monte Carlo estimate of the divergence term:
///
/// ```text
/// F(θ) ≈ −(1/(I·J)) Σ_i Σ_j total(θ + σ·ε⁽ʲ⁾, X̂⁽ⁱ⁾)
/// ```
///
/// up to an additive constant that does not depend on `θ` and is
/// therefore dropped. Context batches and perturbations are drawn from
/// independent derived streams, so enabling perturbations never shifts
/// the context draws.
pub fn mc_kl_estimate<F: Real>(
    params: &ModelParams<F>,
    snapshot: &FeatureSnapshot<F>,
    dist: &ContextDistribution<F>,
    config: &PriorConfig,
    seed: u64,
) -> Result<F> {
    config.validate()?;
    let sigma: F = real(config.sigma);
    let i_count = config.mc_context_samples;
    let j_count = config.mc_param_samples;

    let perturbed: Vec<ModelParams<F>> = (0..j_count)
        .map(|j| {
            if config.sigma == 0.0 {
                params.clone()
            } else {
                let eps = params.sample_perturbation(derive_seed(seed, streams::PERTURB, j as u64));
                params.perturbed(sigma, &eps)
            }
        })
        .collect();

    let mut sum = F::zero();
    for i in 0..i_count {
        let ctx = sample_context(
            dist,
            config.context_batch_size,
            derive_seed(seed, streams::CONTEXT, i as u64),
        )?;
        for theta in &perturbed {
            sum += eb_regularizer(theta, snapshot, &ctx, config.tau_f, config.tau_theta)?;
        }
    }
    let scale: F = real(-1.0 / (i_count * j_count) as f64);
    Ok(scale * sum)
}
