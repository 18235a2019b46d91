//! Model-level contracts: initialization statistics, forward passes
//! against a straight-loop reimplementation, snapshots, checkpoints,
//! and parameter perturbations.

use approx::assert_relative_eq;
use fseb::model::{Activation, InitScheme, MlpConfig, ModelParams, Provenance};
use fseb::num::{rng_from_seed, uniform};
use fseb::tensor::Tensor;
use rand::Rng;
use tempfile::tempdir;

fn tanh_config() -> MlpConfig {
    MlpConfig {
        input_dim: 3,
        hidden_widths: vec![5, 4],
        output_dim: 2,
        activation: Activation::Tanh,
        init_scheme: None,
    }
}

#[test]
fn the_same_seed_initializes_bit_identical_parameters() {
    let config = tanh_config();
    let a = ModelParams::<f64>::init(&config, 99).unwrap();
    let b = ModelParams::<f64>::init(&config, 99).unwrap();
    assert_eq!(a, b);
    let c = ModelParams::<f64>::init(&config, 100).unwrap();
    assert_ne!(a, c);
}

#[test]
fn glorot_weight_variance_matches_its_formula() {
    // A 4→4 layer under Glorot should have weight variance 2/(4+4).
    // Pool the first-layer weights of many independent seeds and check
    // the sample variance against a 3-sigma band: for normal draws the
    // variance estimate has standard deviation σ²·√(2/(n−1)).
    let config = MlpConfig {
        input_dim: 4,
        hidden_widths: vec![4],
        output_dim: 2,
        activation: Activation::Tanh,
        init_scheme: Some(InitScheme::Glorot),
    };
    let mut pool = Vec::with_capacity(10_000);
    let mut seed = 0u64;
    while pool.len() < 10_000 {
        let params = ModelParams::<f64>::init(&config, seed).unwrap();
        pool.extend(params.layers[0].weight.data().iter().copied());
        seed += 1;
    }
    pool.truncate(10_000);
    let n = pool.len() as f64;
    let mean = pool.iter().sum::<f64>() / n;
    let var = pool.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let target = 2.0 / (4.0 + 4.0);
    let band = 3.0 * target * (2.0 / (n - 1.0)).sqrt();
    assert!(
        (var - target).abs() < band,
        "sample variance {} vs target {} ± {}",
        var,
        target,
        band
    );
}

#[test]
fn an_empty_hidden_stack_is_rejected() {
    let config = MlpConfig { hidden_widths: vec![], ..tanh_config() };
    assert!(config.validate().is_err());
    assert!(ModelParams::<f64>::init(&config, 0).is_err());
}

#[test]
fn an_empty_batch_produces_an_empty_feature_matrix() {
    let params = ModelParams::<f64>::init(&tanh_config(), 3).unwrap();
    let empty = Tensor::from_vec(vec![0, 3], vec![]).unwrap();
    let h = params.features(&empty).unwrap();
    assert_eq!(h.shape(), &[0, 4]);
    let logits = params.logits(&empty).unwrap();
    assert_eq!(logits.shape(), &[0, 2]);
}

#[test]
fn a_zeroed_tanh_network_maps_zero_to_zero_features() {
    let mut params = ModelParams::<f64>::init(&tanh_config(), 3).unwrap();
    for (_, t) in params.named_tensors_mut() {
        for v in t.data_mut() {
            *v = 0.0;
        }
    }
    let x = Tensor::from_vec(vec![2, 3], vec![0.0; 6]).unwrap();
    let h = params.features(&x).unwrap();
    assert!(h.data().iter().all(|&v| v == 0.0));
}

/// Plain nested-loop forward pass, written independently of the tensor
/// helpers: for each row, y = act(x·W + b) layer by layer, then h·W_head.
fn straight_loop_logits(params: &ModelParams<f64>, inputs: &Tensor<f64>) -> Vec<Vec<f64>> {
    let n = inputs.shape()[0];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut h: Vec<f64> = inputs.row(i).to_vec();
        for layer in &params.layers {
            let (n_in, n_out) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            assert_eq!(h.len(), n_in);
            let mut next = vec![0.0; n_out];
            for (j, slot) in next.iter_mut().enumerate() {
                let mut z = layer.bias.data()[j];
                for (k, &hk) in h.iter().enumerate() {
                    z += hk * layer.weight.data()[k * n_out + j];
                }
                *slot = match params.activation {
                    Activation::Tanh => z.tanh(),
                    Activation::Relu => z.max(0.0),
                };
            }
            h = next;
        }
        let (d, k_out) = (params.head.shape()[0], params.head.shape()[1]);
        assert_eq!(h.len(), d);
        let mut logits = vec![0.0; k_out];
        for (j, slot) in logits.iter_mut().enumerate() {
            for (k, &hk) in h.iter().enumerate() {
                *slot += hk * params.head.data()[k * k_out + j];
            }
        }
        out.push(logits);
    }
    out
}

#[test]
fn forward_passes_match_a_straight_loop_reimplementation() {
    for seed in 0..8u64 {
        let activation = if seed % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let config = MlpConfig { activation, ..tanh_config() };
        let params = ModelParams::<f64>::init(&config, seed).unwrap();
        let mut rng = rng_from_seed(1000 + seed);
        let data: Vec<f64> = (0..5 * 3).map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
        let x = Tensor::from_vec(vec![5, 3], data).unwrap();
        let got = params.logits(&x).unwrap();
        let want = straight_loop_logits(&params, &x);
        for i in 0..5 {
            for j in 0..2 {
                assert_relative_eq!(got.at(i, j), want[i][j], epsilon = 1e-12, max_relative = 1e-12);
            }
        }
    }
}

#[test]
fn a_zero_head_produces_zero_logits() {
    let mut params = ModelParams::<f64>::init(&tanh_config(), 5).unwrap();
    for v in params.head.data_mut() {
        *v = 0.0;
    }
    let x = Tensor::from_vec(vec![3, 3], vec![0.5; 9]).unwrap();
    let logits = params.logits(&x).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn a_ones_head_with_one_output_sums_the_features() {
    let config = MlpConfig { output_dim: 1, ..tanh_config() };
    let mut params = ModelParams::<f64>::init(&config, 5).unwrap();
    for v in params.head.data_mut() {
        *v = 1.0;
    }
    let x = Tensor::from_vec(vec![3, 3], vec![0.25, -1.0, 0.5, 2.0, 0.0, -0.75, 1.5, 1.0, -2.0])
        .unwrap();
    let h = params.features(&x).unwrap();
    let logits = params.logits(&x).unwrap();
    for i in 0..3 {
        let row_sum: f64 = h.row(i).iter().sum();
        assert_relative_eq!(logits.at(i, 0), row_sum, epsilon = 1e-12);
    }
}

#[test]
fn logits_are_exactly_features_times_the_head() {
    let params = ModelParams::<f64>::init(&tanh_config(), 11).unwrap();
    let mut rng = rng_from_seed(12);
    let data: Vec<f64> = (0..4 * 3).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
    let x = Tensor::from_vec(vec![4, 3], data).unwrap();
    let via_features = params.features(&x).unwrap().matmul(&params.head).unwrap();
    let direct = params.logits(&x).unwrap();
    for (a, b) in via_features.data().iter().zip(direct.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn prediction_is_linear_in_the_head() {
    let config = tanh_config();
    let base = ModelParams::<f64>::init(&config, 21).unwrap();
    let head_a = ModelParams::<f64>::init(&config, 22).unwrap().head;
    let head_b = ModelParams::<f64>::init(&config, 23).unwrap().head;
    let (a, b) = (0.7, -1.3);

    let mut rng = rng_from_seed(24);
    let data: Vec<f64> = (0..6 * 3).map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
    let x = Tensor::from_vec(vec![6, 3], data).unwrap();

    let with_head = |head: Tensor<f64>| {
        let mut p = base.clone();
        p.head = head;
        p.logits(&x).unwrap()
    };
    let mixed = with_head(head_a.scale(a).add(&head_b.scale(b)).unwrap());
    let la = with_head(head_a.clone());
    let lb = with_head(head_b.clone());
    for i in 0..mixed.len() {
        let want = a * la.data()[i] + b * lb.data()[i];
        assert_relative_eq!(mixed.data()[i], want, epsilon = 1e-12, max_relative = 1e-12);
    }
}

#[test]
fn snapshots_are_isolated_from_later_parameter_updates() {
    let mut params = ModelParams::<f64>::init(&tanh_config(), 31).unwrap();
    let snapshot = params.snapshot(Provenance::RandomInit);
    let x = Tensor::from_vec(vec![2, 3], vec![0.1, 0.2, 0.3, -0.1, -0.2, -0.3]).unwrap();
    let before = snapshot.features(&x).unwrap();

    for (_, t) in params.named_tensors_mut() {
        for v in t.data_mut() {
            *v += 10.0;
        }
    }
    let after = snapshot.features(&x).unwrap();
    assert_eq!(before, after);
    assert_eq!(snapshot.provenance(), Provenance::RandomInit);
}

#[test]
fn checkpoints_round_trip_bit_identically() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("model.fseb");
    let params = ModelParams::<f64>::init(&tanh_config(), 41).unwrap();
    params.save_checkpoint(&path).unwrap();
    let restored = ModelParams::<f64>::load_checkpoint(&path).unwrap();
    assert_eq!(params, restored);
    for ((_, a), (_, b)) in params.named_tensors().iter().zip(restored.named_tensors().iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn truncated_checkpoints_are_rejected() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("model.fseb");
    let params = ModelParams::<f64>::init(&tanh_config(), 42).unwrap();
    params.save_checkpoint(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(ModelParams::<f64>::load_checkpoint(&path).is_err());
}

#[test]
fn zero_sigma_perturbation_is_an_exact_copy() {
    let params = ModelParams::<f64>::init(&tanh_config(), 51).unwrap();
    let eps = params.sample_perturbation(7);
    let same = params.perturbed(0.0, &eps);
    assert_eq!(params, same);
}

#[test]
fn perturbations_are_reproducible_in_the_seed() {
    let params = ModelParams::<f64>::init(&tanh_config(), 52).unwrap();
    let a = params.perturbed(1.0, &params.sample_perturbation(9));
    let b = params.perturbed(1.0, &params.sample_perturbation(9));
    let c = params.perturbed(1.0, &params.sample_perturbation(10));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn perturbation_noise_is_centered() {
    // (perturbed − θ)/σ is a standard normal draw per coordinate; the
    // mean over 10⁴ seeds stays within 3/√10⁴ of zero.
    let config = MlpConfig {
        input_dim: 2,
        hidden_widths: vec![3],
        output_dim: 2,
        activation: Activation::Tanh,
        init_scheme: None,
    };
    let params = ModelParams::<f64>::init(&config, 61).unwrap();
    let base = params.flatten();
    let sigma = 0.5;
    let trials = 10_000;
    let mut sums = vec![0.0f64; base.len()];
    for seed in 0..trials as u64 {
        let shifted = params.perturbed(sigma, &params.sample_perturbation(seed)).flatten();
        for (s, (after, before)) in sums.iter_mut().zip(shifted.iter().zip(&base)) {
            *s += (after - before) / sigma;
        }
    }
    let bound = 3.0 / (trials as f64).sqrt();
    for (i, s) in sums.iter().enumerate() {
        let mean = s / trials as f64;
        assert!(mean.abs() < bound, "coordinate {}: mean {} exceeds {}", i, mean, bound);
    }
}

#[test]
fn relu_networks_prefer_the_he_scheme_by_default() {
    let relu = MlpConfig { activation: Activation::Relu, ..tanh_config() };
    assert_eq!(relu.resolved_init(), InitScheme::He);
    assert_eq!(tanh_config().resolved_init(), InitScheme::Glorot);
}

#[test]
fn random_inputs_stay_finite_through_both_activations() {
    let mut rng = rng_from_seed(71);
    for seed in 0..4u64 {
        let activation = if rng.random_range(0..2) == 0 { Activation::Tanh } else { Activation::Relu };
        let config = MlpConfig { activation, ..tanh_config() };
        let params = ModelParams::<f64>::init(&config, seed).unwrap();
        let data: Vec<f64> = (0..10 * 3).map(|_| uniform(&mut rng, -50.0, 50.0)).collect();
        let x = Tensor::from_vec(vec![10, 3], data).unwrap();
        assert!(params.predict_proba(&x).unwrap().all_finite());
    }
}
