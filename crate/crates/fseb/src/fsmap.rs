//! Reference implementation of function-space MAP estimation with the
//! change-of-variables correction.
//!
//! Pulling a parameter-space Gaussian prior through the network induces a
//! density over functions whose mode differs from the parameter-space
//! mode by a log-volume adjustment `−½·ln det(J(θ)ᵀJ(θ))`, where `J` is
//! the `(M·K) × P` Jacobian of the stacked outputs with respect to the
//! parameters. On a finite evaluation set the corrected objective, as a
//! minimized loss, is
//!
//! ```text
//! loss(θ) = Σ CE(f(x; θ), y) + (τ_θ/2)·‖θ‖² + ½·ln det(J(θ)ᵀ J(θ))
//! ```
//!
//! The determinant only exists when `M·K ≥ P`, which confines this
//! estimator to very small models — hence the hard parameter cap. It
//! exists as a baseline to compare the scalable objectives against, not
//! as a practical training path.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{cross_entropy_sum, ModelParams};
use crate::num::{real, to_f64, Real};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Hard cap on parameter count for the dense-Jacobian routines.
pub const MAX_REFERENCE_PARAMS: usize = 500;

/// Relative singular-value threshold below which the Jacobian is treated
/// as rank deficient and the determinant is stabilized with jitter.
const RANK_DEFICIENCY_RTOL: f64 = 1e-12;

/// Diagonal stabilizer applied to `JᵀJ` on the rank-deficient path.
const LOG_DET_JITTER: f64 = 1e-10;

/// A differentiable model whose full parameter vector is small enough to
/// flatten. Implemented by the MLP and by a bare linear map.
pub trait TapeModel<F: Real>: Clone {
    fn param_count(&self) -> usize;
    /// Canonical flat parameter vector.
    fn flat_params(&self) -> Vec<F>;
    /// Rebuilds the model from a canonical flat vector.
    fn with_flat(&self, flat: &[F]) -> Result<Self>;
    fn output_dim(&self) -> usize;
    /// Registers the parameters on the tape and returns the batch logits.
    fn logits_on_tape(&self, tape: &Tape<F>, inputs: &Tensor<F>) -> Result<Var<F>>;
    /// Registers the parameters (again) and returns Σθ². Reusing leaf
    /// names is intentional: gradients accumulate across registrations.
    fn squared_norm_on_tape(&self, tape: &Tape<F>) -> Result<Var<F>>;
    /// Flattens named gradients into canonical order.
    fn flatten_grads(&self, grads: &Gradients<F>) -> Result<Vec<F>>;
}

impl<F: Real> TapeModel<F> for ModelParams<F> {
    fn param_count(&self) -> usize {
        ModelParams::param_count(self)
    }

    fn flat_params(&self) -> Vec<F> {
        self.flatten()
    }

    fn with_flat(&self, flat: &[F]) -> Result<Self> {
        self.unflatten(flat)
    }

    fn output_dim(&self) -> usize {
        ModelParams::output_dim(self)
    }

    fn logits_on_tape(&self, tape: &Tape<F>, inputs: &Tensor<F>) -> Result<Var<F>> {
        let live = self.register(tape)?;
        let xv = tape.constant(inputs.clone())?;
        live.logits_var(&xv)
    }

    fn squared_norm_on_tape(&self, tape: &Tape<F>) -> Result<Var<F>> {
        self.register(tape)?.squared_norm_var()
    }

    fn flatten_grads(&self, grads: &Gradients<F>) -> Result<Vec<F>> {
        let mut out = Vec::with_capacity(self.param_count());
        for (name, t) in self.named_tensors() {
            let g = grads.get(&name).ok_or_else(|| {
                Error::InvalidArgument(format!("gradients are missing leaf {}", name))
            })?;
            if g.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "flatten_grads",
                    details: format!("{}: {:?} vs {:?}", name, g.shape(), t.shape()),
                });
            }
            out.extend_from_slice(g.data());
        }
        Ok(out)
    }
}

/// A bias-free linear classifier `f(x) = x·W`. Its output Jacobian does
/// not depend on the parameters, which makes it the canonical sanity
/// case for the correction term: the correction must be constant.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel<F: Real> {
    pub weight: Tensor<F>,
}

impl<F: Real> LinearModel<F> {
    pub fn new(weight: Tensor<F>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "linear_model",
                details: format!("weight must be D×K, got {:?}", weight.shape()),
            });
        }
        Ok(Self { weight })
    }
}

impl<F: Real> TapeModel<F> for LinearModel<F> {
    fn param_count(&self) -> usize {
        self.weight.len()
    }

    fn flat_params(&self) -> Vec<F> {
        self.weight.data().to_vec()
    }

    fn with_flat(&self, flat: &[F]) -> Result<Self> {
        if flat.len() != self.weight.len() {
            return Err(Error::ShapeMismatch {
                op: "with_flat",
                details: format!("expected {} parameters, got {}", self.weight.len(), flat.len()),
            });
        }
        Ok(Self { weight: Tensor::from_vec(self.weight.shape().to_vec(), flat.to_vec())? })
    }

    fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    fn logits_on_tape(&self, tape: &Tape<F>, inputs: &Tensor<F>) -> Result<Var<F>> {
        let w = tape.leaf("weight", self.weight.clone())?;
        tape.constant(inputs.clone())?.matmul(&w)
    }

    fn squared_norm_on_tape(&self, tape: &Tape<F>) -> Result<Var<F>> {
        tape.leaf("weight", self.weight.clone())?.square()?.sum()
    }

    fn flatten_grads(&self, grads: &Gradients<F>) -> Result<Vec<F>> {
        let g = grads
            .get("weight")
            .ok_or_else(|| Error::InvalidArgument("gradients are missing leaf weight".into()))?;
        Ok(g.data().to_vec())
    }
}

fn check_reference_size(param_count: usize) -> Result<()> {
    if param_count > MAX_REFERENCE_PARAMS {
        return Err(Error::InvalidArgument(format!(
            "the dense-Jacobian reference path caps models at {} parameters; this one has {}",
            MAX_REFERENCE_PARAMS, param_count
        )));
    }
    Ok(())
}

/// Dense Jacobian of the stacked outputs at a set of evaluation points,
/// with the points and parameter count carried alongside the matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianBlock {
    /// `(M·K) × P`; row `m·K + k` holds `∂ f(x_m)_k / ∂θ`.
    pub matrix: Tensor<f64>,
    /// The `M × D` evaluation points the rows were computed at.
    pub eval_points: Tensor<f64>,
    pub param_count: usize,
}

impl JacobianBlock {
    pub fn new(matrix: Tensor<f64>, eval_points: Tensor<f64>) -> Result<Self> {
        if matrix.rank() != 2 || eval_points.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "jacobian_block",
                details: format!(
                    "matrix and eval points must be rank 2, got {:?} and {:?}",
                    matrix.shape(),
                    eval_points.shape()
                ),
            });
        }
        let (rows, m) = (matrix.shape()[0], eval_points.shape()[0]);
        if m == 0 || rows % m != 0 {
            return Err(Error::ShapeMismatch {
                op: "jacobian_block",
                details: format!("{} rows do not stack evenly over {} evaluation points", rows, m),
            });
        }
        if !matrix.all_finite() {
            return Err(Error::Numerical("jacobian contains non-finite values".into()));
        }
        let param_count = matrix.shape()[1];
        Ok(Self { matrix, eval_points, param_count })
    }
}

/// Builds the dense `(M·K) × P` Jacobian of the stacked outputs with
/// respect to the flattened parameters, one reverse pass per output
/// entry.
pub fn dense_jacobian<F: Real, M: TapeModel<F>>(
    model: &M,
    inputs: &Tensor<F>,
) -> Result<JacobianBlock> {
    check_reference_size(model.param_count())?;
    if inputs.rank() != 2 || inputs.shape()[0] == 0 {
        return Err(Error::ShapeMismatch {
            op: "dense_jacobian",
            details: format!("inputs must be a non-empty M×D matrix, got {:?}", inputs.shape()),
        });
    }
    let m = inputs.shape()[0];
    let k = model.output_dim();
    let p = model.param_count();
    let mut rows: Vec<f64> = Vec::with_capacity(m * k * p);
    for mi in 0..m {
        let x_row = inputs.row_tensor(mi).reshaped(vec![1, inputs.shape()[1]])?;
        for ki in 0..k {
            let tape = Tape::new();
            let logits = model.logits_on_tape(&tape, &x_row)?;
            let mut pick = Tensor::zeros(vec![1, k]);
            *pick.at_mut(0, ki) = F::one();
            let scalar = logits.mul(&tape.constant(pick)?)?.sum()?;
            let grads = tape.backward(&scalar)?;
            let flat = model.flatten_grads(&grads)?;
            rows.extend(flat.iter().map(|&v| to_f64(v)));
        }
    }
    let eval_points =
        Tensor::from_vec(inputs.shape().to_vec(), inputs.data().iter().map(|&v| to_f64(v)).collect())?;
    JacobianBlock::new(Tensor::from_vec(vec![m * k, p], rows)?, eval_points)
}

/// The log-volume adjustment of the induced function density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogDetCorrection {
    /// `−½·ln det(JᵀJ)`, stabilized with jitter on the rank-deficient
    /// path. This is the adjustment as it appears in the maximized
    /// posterior; the minimized loss enters it with the sign flipped.
    pub value: f64,
    /// Whether the jitter fallback was taken.
    pub jitter_used: bool,
}

/// Computes `−½·ln det(JᵀJ)` from the singular values of `J`, i.e.
/// `−Σ ln σ_i`. When the smallest singular value collapses relative to
/// the largest, the determinant is stabilized as `−½·Σ ln(σ_i² + jitter)`
/// instead; the flag reports which path was taken so downstream numbers
/// are interpretable.
pub fn log_det_correction(jacobian: &Tensor<f64>) -> Result<LogDetCorrection> {
    if jacobian.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "log_det_correction",
            details: format!("jacobian must be rank 2, got {:?}", jacobian.shape()),
        });
    }
    let (mk, p) = (jacobian.shape()[0], jacobian.shape()[1]);
    if mk < p {
        return Err(Error::InvalidArgument(format!(
            "the correction needs at least as many output entries as parameters (got {} rows for {} parameters)",
            mk, p
        )));
    }
    if !jacobian.all_finite() {
        return Err(Error::Numerical("jacobian contains non-finite values".into()));
    }
    let mat = DMatrix::from_row_slice(mk, p, jacobian.data());
    let svd = mat.svd(false, false);
    let mut sigmas: Vec<f64> = svd.singular_values.iter().copied().collect();
    sigmas.sort_by(|a, b| b.total_cmp(a));
    let sigma_max = sigmas[0];
    let sigma_min = sigmas[p - 1];

    if sigma_max == 0.0 || sigma_min <= sigma_max * RANK_DEFICIENCY_RTOL {
        let value = -0.5 * sigmas.iter().map(|&s| (s * s + LOG_DET_JITTER).ln()).sum::<f64>();
        return Ok(LogDetCorrection { value, jitter_used: true });
    }
    let value = -sigmas.iter().map(|&s| s.ln()).sum::<f64>();
    Ok(LogDetCorrection { value, jitter_used: false })
}

/// Value of the corrected full-batch loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FsMapLoss {
    pub total: f64,
    pub data_nll: f64,
    pub parameter_penalty: f64,
    /// `½·ln det(JᵀJ)` — the log-volume adjustment negated for
    /// minimization; zero when the correction is disabled.
    pub correction: f64,
    pub jitter_used: bool,
}

/// Evaluates the corrected loss on a full batch. `with_correction =
/// false` drops the log-volume term, leaving an ordinary penalized fit
/// for side-by-side comparisons.
pub fn fs_map_loss<F: Real, M: TapeModel<F>>(
    model: &M,
    inputs: &Tensor<F>,
    labels: &[usize],
    tau_theta: f64,
    with_correction: bool,
) -> Result<FsMapLoss> {
    let tape = Tape::new();
    let logits = model.logits_on_tape(&tape, inputs)?;
    let data_nll = to_f64(cross_entropy_sum(&logits, labels)?.item()?);
    let parameter_penalty =
        tau_theta / 2.0 * to_f64(model.squared_norm_on_tape(&tape)?.item()?);
    let (correction, jitter_used) = if with_correction {
        let jac = dense_jacobian(model, inputs)?;
        let c = log_det_correction(&jac.matrix)?;
        (-c.value, c.jitter_used)
    } else {
        (0.0, false)
    };
    Ok(FsMapLoss {
        total: data_nll + parameter_penalty + correction,
        data_nll,
        parameter_penalty,
        correction,
        jitter_used,
    })
}

/// Gradient of the corrected loss with respect to the flattened
/// parameters, in `f64`. The fit and penalty terms differentiate exactly
/// through the tape; the log-volume term is differentiated by central
/// differences with the given step, since its exact derivative would
/// need third-order network derivatives this crate does not implement.
pub fn fs_map_grad<F: Real, M: TapeModel<F>>(
    model: &M,
    inputs: &Tensor<F>,
    labels: &[usize],
    tau_theta: f64,
    with_correction: bool,
    fd_step: f64,
) -> Result<Vec<f64>> {
    check_reference_size(model.param_count())?;
    let tape = Tape::new();
    let logits = model.logits_on_tape(&tape, inputs)?;
    let ce = cross_entropy_sum(&logits, labels)?;
    let penalty = model.squared_norm_on_tape(&tape)?.scale(real(tau_theta / 2.0))?;
    let smooth = ce.add(&penalty)?;
    let grads = tape.backward(&smooth)?;
    let mut total: Vec<f64> =
        model.flatten_grads(&grads)?.iter().map(|&v| to_f64(v)).collect();

    if with_correction {
        let x0: Vec<f64> = model.flat_params().iter().map(|&v| to_f64(v)).collect();
        let mut x = x0.clone();
        for i in 0..x.len() {
            let orig = x[i];
            // Central difference of the minimized-loss term ½·ln det(JᵀJ),
            // i.e. the negated adjustment.
            let eval = |xi: f64, x: &mut Vec<f64>| -> Result<f64> {
                x[i] = xi;
                let flat: Vec<F> = x.iter().map(|&v| real(v)).collect();
                let shifted = model.with_flat(&flat)?;
                let jac = dense_jacobian(&shifted, inputs)?;
                Ok(-log_det_correction(&jac.matrix)?.value)
            };
            let fp = eval(orig + fd_step, &mut x)?;
            let fm = eval(orig - fd_step, &mut x)?;
            x[i] = orig;
            total[i] += (fp - fm) / (2.0 * fd_step);
        }
    }
    Ok(total)
}
