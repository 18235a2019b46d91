//! The dense-Jacobian reference path: Jacobian structure checks against
//! closed forms and finite differences, the log-volume adjustment against
//! a dense elimination oracle, and the corrected loss against a fully
//! hand-composed pipeline.

use approx::assert_relative_eq;
use fseb::fsmap::{
    dense_jacobian, fs_map_grad, fs_map_loss, log_det_correction, JacobianBlock, LinearModel,
};
use fseb::model::{Activation, MlpConfig, ModelParams};
use fseb::num::{rng_from_seed, std_normal, uniform};
use fseb::tensor::Tensor;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = rng_from_seed(seed);
    let data: Vec<f64> = (0..rows * cols).map(|_| std_normal(&mut rng)).collect();
    Tensor::from_vec(vec![rows, cols], data).unwrap()
}

fn tiny_net(seed: u64, activation: Activation) -> (MlpConfig, ModelParams<f64>) {
    let config = MlpConfig {
        input_dim: 2,
        hidden_widths: vec![3],
        output_dim: 2,
        activation,
        init_scheme: None,
    };
    let params = ModelParams::init(&config, seed).unwrap();
    (config, params)
}

/// ln det of a symmetric positive-definite matrix by LU elimination with
/// partial pivoting, summing the logs of the pivot magnitudes. Written
/// against plain `Vec<Vec<f64>>` so it shares nothing with the crate.
fn log_det_spd_oracle(a: &Tensor<f64>) -> f64 {
    let n = a.shape()[0];
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    let mut log_det = 0.0;
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, pivot_row);
        let pivot = m[col][col];
        assert!(pivot.abs() > 0.0, "oracle hit a zero pivot");
        log_det += pivot.abs().ln();
        for row in col + 1..n {
            let factor = m[row][col] / pivot;
            for k in col..n {
                m[row][k] -= factor * m[col][k];
            }
        }
    }
    log_det
}

/// JᵀJ by straight loops.
fn gram_oracle(j: &Tensor<f64>) -> Tensor<f64> {
    let (rows, cols) = (j.shape()[0], j.shape()[1]);
    let mut g = Tensor::zeros(vec![cols, cols]);
    for a in 0..cols {
        for b in 0..cols {
            let mut acc = 0.0;
            for r in 0..rows {
                acc += j.at(r, a) * j.at(r, b);
            }
            *g.at_mut(a, b) = acc;
        }
    }
    g
}

/// Σ −ln p(y_i | x_i) by per-row softmax, no shared code with the crate's
/// loss path beyond the forward logits.
fn cross_entropy_oracle(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        total -= (row[label] - m) - z.ln();
    }
    total
}

/// Jacobian by central differences over the flattened parameters.
fn fd_jacobian(params: &ModelParams<f64>, inputs: &Tensor<f64>, h: f64) -> Tensor<f64> {
    let (m, k, p) = (inputs.shape()[0], params.output_dim(), params.param_count());
    let flat = params.flatten();
    let mut jac = Tensor::zeros(vec![m * k, p]);
    for col in 0..p {
        let mut plus = flat.clone();
        plus[col] += h;
        let mut minus = flat.clone();
        minus[col] -= h;
        let lp = params.unflatten(&plus).unwrap().logits(inputs).unwrap();
        let lm = params.unflatten(&minus).unwrap().logits(inputs).unwrap();
        for mi in 0..m {
            for ki in 0..k {
                *jac.at_mut(mi * k + ki, col) = (lp.at(mi, ki) - lm.at(mi, ki)) / (2.0 * h);
            }
        }
    }
    jac
}

#[test]
fn one_output_linear_jacobian_rows_are_the_inputs() {
    let w = Tensor::from_vec(vec![3, 1], vec![0.4, -1.2, 2.5]).unwrap();
    let model = LinearModel::new(w).unwrap();
    let x = random_matrix(5, 3, 1);
    let jac = dense_jacobian(&model, &x).unwrap();
    assert_eq!(jac.matrix.shape(), &[5, 3]);
    for i in 0..5 {
        assert_eq!(jac.matrix.row(i), x.row(i), "row {}", i);
    }
}

#[test]
fn head_columns_carry_the_features_in_a_kronecker_pattern() {
    let (_, params) = tiny_net(2, Activation::Tanh);
    let x = random_matrix(4, 2, 3);
    let jac = dense_jacobian(&params, &x).unwrap().matrix;
    let features = params.features(&x).unwrap();
    let (k, p) = (params.output_dim(), params.param_count());
    let feature_dim = params.feature_dim();
    let head_offset = p - feature_dim * k;

    // f = h·W_head, so ∂f_k/∂W[d, k'] = h_d when k' = k and 0 otherwise.
    for mi in 0..4 {
        for ki in 0..k {
            let row = jac.row(mi * k + ki);
            for d in 0..feature_dim {
                for kp in 0..k {
                    let want = if kp == ki { features.at(mi, d) } else { 0.0 };
                    assert_eq!(row[head_offset + d * k + kp], want);
                }
            }
        }
    }
}

#[test]
fn a_zeroed_tanh_network_has_a_zero_head_block() {
    let (_, init) = tiny_net(4, Activation::Tanh);
    let params = init.unflatten(&vec![0.0; init.param_count()]).unwrap();
    let x = random_matrix(6, 2, 5);

    // All-zero parameters push every input to the zero feature vector,
    // so the head block of the Jacobian must vanish identically.
    let features = params.features(&x).unwrap();
    assert!(features.data().iter().all(|&v| v == 0.0));

    let jac = dense_jacobian(&params, &x).unwrap().matrix;
    let head_cols = params.feature_dim() * params.output_dim();
    let head_offset = params.param_count() - head_cols;
    for r in 0..jac.shape()[0] {
        for c in head_offset..params.param_count() {
            assert_eq!(jac.at(r, c), 0.0, "row {} col {}", r, c);
        }
    }
}

#[test]
fn random_tiny_network_jacobians_match_central_differences() {
    for (seed, activation) in
        [(10, Activation::Tanh), (11, Activation::Relu), (12, Activation::Tanh)]
    {
        let (_, params) = tiny_net(seed, activation);
        let mut rng = rng_from_seed(100 + seed);
        let x = Tensor::from_vec(
            vec![4, 2],
            (0..8).map(|_| uniform(&mut rng, -1.5, 1.5)).collect(),
        )
        .unwrap();
        let exact = dense_jacobian(&params, &x).unwrap().matrix;
        let fd = fd_jacobian(&params, &x, 1e-6);
        for r in 0..exact.shape()[0] {
            for c in 0..exact.shape()[1] {
                assert_relative_eq!(
                    exact.at(r, c),
                    fd.at(r, c),
                    epsilon = 1e-7,
                    max_relative = 1e-5
                );
            }
        }
    }
}

#[test]
fn orthonormal_columns_cost_nothing() {
    // Tall [I; 0]: every singular value is one, det(JᵀJ) = 1.
    let mut jac = Tensor::zeros(vec![7, 4]);
    for i in 0..4 {
        *jac.at_mut(i, i) = 1.0;
    }
    let got = log_det_correction(&jac).unwrap();
    assert!(!got.jitter_used);
    assert_eq!(got.value, 0.0);
}

#[test]
fn a_doubled_identity_costs_minus_p_ln_two() {
    let p = 6;
    let mut jac = Tensor::zeros(vec![p, p]);
    for i in 0..p {
        *jac.at_mut(i, i) = 2.0;
    }
    let got = log_det_correction(&jac).unwrap().value;
    assert_relative_eq!(got, -(p as f64) * 2.0f64.ln(), epsilon = 1e-12);
}

#[test]
fn singular_values_reproduce_the_dense_elimination_log_det() {
    let mut case = 0u64;
    for &(rows, cols) in &[(20usize, 5usize), (60, 12), (100, 30), (200, 50)] {
        for trial in 0..3 {
            case += 1;
            let jac = random_matrix(rows, cols, 1000 + 17 * case + trial);
            let got = log_det_correction(&jac).unwrap();
            assert!(!got.jitter_used, "{}x{} trial {}", rows, cols, trial);
            let oracle = -0.5 * log_det_spd_oracle(&gram_oracle(&jac));
            assert_relative_eq!(got.value, oracle, epsilon = 1e-8, max_relative = 1e-8);
        }
    }
}

#[test]
fn rescaling_shifts_the_adjustment_by_minus_p_ln_c() {
    let jac = random_matrix(40, 10, 42);
    let base = log_det_correction(&jac).unwrap().value;
    for &c in &[0.5f64, 2.0, 10.0] {
        let scaled = log_det_correction(&jac.scale(c)).unwrap().value;
        assert_relative_eq!(scaled - base, -10.0 * c.ln(), epsilon = 1e-9);
    }
}

#[test]
fn blocks_validate_their_stacking_and_finiteness() {
    let eval = random_matrix(3, 2, 50);
    assert!(JacobianBlock::new(random_matrix(6, 4, 51), eval.clone()).is_ok());
    // Seven rows cannot stack evenly over three evaluation points.
    assert!(JacobianBlock::new(random_matrix(7, 4, 52), eval.clone()).is_err());
    let mut bad = random_matrix(6, 4, 53);
    *bad.at_mut(2, 2) = f64::NAN;
    assert!(JacobianBlock::new(bad, eval).is_err());
}

#[test]
fn wide_jacobians_are_rejected_and_the_cap_is_enforced() {
    assert!(log_det_correction(&random_matrix(4, 9, 60)).is_err());
    let config = MlpConfig {
        input_dim: 8,
        hidden_widths: vec![40, 40],
        output_dim: 8,
        activation: Activation::Tanh,
        init_scheme: None,
    };
    let params = ModelParams::<f64>::init(&config, 61).unwrap();
    let x = random_matrix(2, 8, 62);
    assert!(dense_jacobian(&params, &x).is_err());
}

#[test]
fn linear_models_keep_the_same_gradient_with_or_without_correction() {
    // The linear Jacobian never moves with the parameters, so the
    // finite-difference derivative of the adjustment must vanish.
    let model = LinearModel::new(random_matrix(3, 2, 70)).unwrap();
    let x = random_matrix(6, 3, 71);
    let labels = vec![0, 1, 1, 0, 1, 0];
    let with = fs_map_grad(&model, &x, &labels, 0.3, true, 1e-5).unwrap();
    let without = fs_map_grad(&model, &x, &labels, 0.3, false, 1e-5).unwrap();
    assert_eq!(with.len(), without.len());
    for (a, b) in with.iter().zip(without.iter()) {
        assert!((a - b).abs() < 1e-4, "{} vs {}", a, b);
    }
}

#[test]
fn a_linear_model_correction_value_never_moves() {
    let x = random_matrix(6, 3, 72);
    let labels = vec![1, 0, 1, 1, 0, 0];
    let baseline =
        fs_map_loss(&LinearModel::new(random_matrix(3, 2, 73)).unwrap(), &x, &labels, 0.0, true)
            .unwrap()
            .correction;
    for seed in 74..78 {
        let other =
            fs_map_loss(&LinearModel::new(random_matrix(3, 2, seed)).unwrap(), &x, &labels, 0.0, true)
                .unwrap()
                .correction;
        assert_eq!(other.to_bits(), baseline.to_bits());
    }
}

#[test]
fn disabling_everything_leaves_bare_cross_entropy() {
    let (_, params) = tiny_net(80, Activation::Relu);
    let x = random_matrix(5, 2, 81);
    let labels = vec![0, 1, 0, 0, 1];
    let loss = fs_map_loss(&params, &x, &labels, 0.0, false).unwrap();
    assert_eq!(loss.parameter_penalty, 0.0);
    assert_eq!(loss.correction, 0.0);
    let oracle = cross_entropy_oracle(&params.logits(&x).unwrap(), &labels);
    assert_relative_eq!(loss.total, oracle, epsilon = 1e-12, max_relative = 1e-12);
}

#[test]
fn the_corrected_loss_matches_a_hand_composed_pipeline() {
    // P = 2·3 + 3 + 3·2 = 15, so 8 two-class evaluation points give
    // M·K = 16 ≥ 15.
    let (_, params) = tiny_net(90, Activation::Tanh);
    let x = random_matrix(8, 2, 91);
    let labels = vec![0, 1, 1, 0, 1, 0, 0, 1];
    let tau_theta = 0.2;

    let loss = fs_map_loss(&params, &x, &labels, tau_theta, true).unwrap();
    assert!(!loss.jitter_used);

    // Everything below is rebuilt from scratch: finite-difference
    // Jacobian, loop-built Gram matrix, elimination log-det, softmax
    // cross-entropy, and an explicit squared norm.
    let jac = fd_jacobian(&params, &x, 1e-5);
    let correction = 0.5 * log_det_spd_oracle(&gram_oracle(&jac));
    let ce = cross_entropy_oracle(&params.logits(&x).unwrap(), &labels);
    let norm_sq: f64 = params.flatten().iter().map(|v| v * v).sum();
    let oracle = ce + tau_theta / 2.0 * norm_sq + correction;

    assert_relative_eq!(loss.total, oracle, epsilon = 1e-6, max_relative = 1e-6);
    assert_relative_eq!(
        loss.total,
        loss.data_nll + loss.parameter_penalty + loss.correction,
        epsilon = 1e-12
    );
}

#[test]
fn the_reported_gradient_matches_differences_of_the_reported_loss() {
    let (_, params) = tiny_net(95, Activation::Tanh);
    let x = random_matrix(8, 2, 96);
    let labels = vec![1, 0, 1, 1, 0, 0, 1, 0];
    let tau_theta = 0.1;

    let grad = fs_map_grad(&params, &x, &labels, tau_theta, true, 1e-5).unwrap();
    let flat = params.flatten();
    let h = 1e-5;
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += h;
        let mut minus = flat.clone();
        minus[i] -= h;
        let lp = fs_map_loss(&params.unflatten(&plus).unwrap(), &x, &labels, tau_theta, true)
            .unwrap()
            .total;
        let lm = fs_map_loss(&params.unflatten(&minus).unwrap(), &x, &labels, tau_theta, true)
            .unwrap()
            .total;
        let fd = (lp - lm) / (2.0 * h);
        assert_relative_eq!(grad[i], fd, epsilon = 1e-5, max_relative = 1e-4);
    }
}
