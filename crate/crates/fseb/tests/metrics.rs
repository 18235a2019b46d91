//! Metric implementations checked against deliberately slow,
//! independently written oracles: fresh binning loops for calibration,
//! a selection-sort threshold sweep for selective prediction, and an
//! O(n²) pair count for the ranking statistic.

use approx::assert_relative_eq;
use fseb::metrics::{
    accuracy, auroc, ece, ece_bin_table, entropy_nats, entropy_ood_auroc, evaluate,
    far_field_entropy, mean_entropy, nll, selective_accuracy_auc, selective_curve, GridSpec,
    PredictionSet, DEFAULT_ECE_BINS,
};
use fseb::model::{Activation, MlpConfig, ModelParams};
use fseb::num::{rng_from_seed, uniform};
use fseb::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

/// Random prediction set: softmax rows over uniform logits with uniform
/// labels.
fn random_set(n: usize, k: usize, seed: u64) -> PredictionSet<f64> {
    let mut rng = rng_from_seed(seed);
    let mut data = Vec::with_capacity(n * k);
    for _ in 0..n {
        let logits: Vec<f64> = (0..k).map(|_| uniform(&mut rng, -3.0, 3.0)).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / z));
    }
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    PredictionSet::new(Tensor::from_vec(vec![n, k], data).unwrap(), labels).unwrap()
}

fn one_hot_set(labels: &[usize], k: usize) -> PredictionSet<f64> {
    let n = labels.len();
    let mut data = vec![0.0; n * k];
    for (i, &y) in labels.iter().enumerate() {
        data[i * k + y] = 1.0;
    }
    PredictionSet::new(Tensor::from_vec(vec![n, k], data).unwrap(), labels.to_vec()).unwrap()
}

#[test]
fn confident_correct_predictions_score_perfectly() {
    let set = one_hot_set(&[0, 1, 2, 1], 3);
    assert_eq!(accuracy(&set), 1.0);
    assert_eq!(nll(&set), 0.0);
    assert_eq!(ece(&set, 10).unwrap(), 0.0);
    assert_eq!(selective_accuracy_auc(&set), 1.0);
}

#[test]
fn uniform_predictions_pay_log_k() {
    let k = 10;
    let n = 6;
    let data = vec![1.0 / k as f64; n * k];
    let set =
        PredictionSet::new(Tensor::from_vec(vec![n, k], data).unwrap(), vec![3; n]).unwrap();
    assert_relative_eq!(nll(&set), (k as f64).ln(), epsilon = 1e-12);
    assert_relative_eq!(mean_entropy(&set), (k as f64).ln(), epsilon = 1e-12);
}

#[test]
fn nll_and_accuracy_match_a_straight_loop() {
    for seed in 0..10u64 {
        let set = random_set(60, 4, seed);
        let mut correct = 0usize;
        let mut total_nll = 0.0;
        for i in 0..set.len() {
            let row = set.probs().row(i);
            let mut best = 0;
            for j in 1..4 {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == set.labels()[i] {
                correct += 1;
            }
            total_nll -= row[set.labels()[i]].ln();
        }
        assert_relative_eq!(accuracy(&set), correct as f64 / 60.0, epsilon = 1e-15);
        assert_relative_eq!(nll(&set), total_nll / 60.0, epsilon = 1e-12, max_relative = 1e-12);
    }
}

#[test]
fn fixed_confidence_half_right_has_the_textbook_gap() {
    // Ten rows at confidence 0.8, five of them correct: one occupied
    // bin with |acc − conf| = |0.5 − 0.8|.
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..10 {
        data.extend([0.8, 0.2]);
        labels.push(if i < 5 { 0 } else { 1 });
    }
    let set =
        PredictionSet::new(Tensor::from_vec(vec![10, 2], data).unwrap(), labels).unwrap();
    assert_relative_eq!(ece(&set, 10).unwrap(), 0.3, epsilon = 1e-12);
}

/// Brute-force calibration oracle: for every bin, scan all points and
/// test membership against the interval bounds directly.
fn ece_oracle(set: &PredictionSet<f64>, m: usize) -> f64 {
    let n = set.len();
    let mut total = 0.0;
    for b in 0..m {
        let lo = b as f64 / m as f64;
        let hi = (b + 1) as f64 / m as f64;
        let mut members = Vec::new();
        for i in 0..n {
            let row = set.probs().row(i);
            let conf = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let inside = if b == 0 { conf <= hi } else { conf > lo && conf <= hi };
            if inside {
                members.push(i);
            }
        }
        if members.is_empty() {
            continue;
        }
        let conf_mean: f64 = members
            .iter()
            .map(|&i| set.probs().row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / members.len() as f64;
        let acc_mean: f64 = members
            .iter()
            .map(|&i| {
                let row = set.probs().row(i);
                let mut best = 0;
                for j in 1..row.len() {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                if best == set.labels()[i] {
                    1.0
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            / members.len() as f64;
        total += members.len() as f64 / n as f64 * (acc_mean - conf_mean).abs();
    }
    total
}

#[test]
fn calibration_error_matches_the_brute_force_binning_oracle() {
    let mut rng = rng_from_seed(42);
    for trial in 0..100u64 {
        let n = rng.random_range(1..=200usize);
        let k = rng.random_range(2..=5usize);
        let m = rng.random_range(1..=20usize);
        let set = random_set(n, k, 10_000 + trial);
        let got = ece(&set, m).unwrap();
        let want = ece_oracle(&set, m);
        assert!((got - want).abs() < 1e-12, "trial {}: {} vs {}", trial, got, want);
        assert!((0.0..=1.0).contains(&got));
    }
}

#[test]
fn bin_tables_are_consistent_with_the_error_they_summarize() {
    let set = random_set(150, 3, 77);
    let table = ece_bin_table(&set, DEFAULT_ECE_BINS).unwrap();
    assert_eq!(table.len(), DEFAULT_ECE_BINS);
    assert_eq!(table.iter().map(|b| b.count).sum::<usize>(), 150);
    let rebuilt: f64 = table
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / 150.0 * (b.accuracy - b.mean_confidence).abs())
        .sum();
    assert_relative_eq!(rebuilt, ece(&set, DEFAULT_ECE_BINS).unwrap(), epsilon = 1e-15);
}

#[test]
fn entropy_handles_hard_zeros_and_uniform_rows() {
    assert_eq!(entropy_nats(&[1.0, 0.0, 0.0]), 0.0);
    assert_relative_eq!(entropy_nats(&[0.25; 4]), 4.0f64.ln(), epsilon = 1e-14);
    let row = [0.6, 0.3, 0.1];
    let oracle: f64 = row.iter().map(|&p: &f64| -p * p.ln()).sum();
    assert_relative_eq!(entropy_nats(&row), oracle, epsilon = 1e-14);
}

#[test]
fn the_two_point_selective_curve_is_the_textbook_example() {
    // Scores 0.9 (correct) and 0.6 (wrong): accuracies [1, 0.5].
    let data = vec![0.9, 0.1, 0.6, 0.4];
    let set =
        PredictionSet::new(Tensor::from_vec(vec![2, 2], data).unwrap(), vec![0, 1]).unwrap();
    let curve = selective_curve(&set);
    assert_eq!(curve.len(), 2);
    assert_relative_eq!(curve[0].coverage, 0.5);
    assert_relative_eq!(curve[0].accuracy, 1.0);
    assert_relative_eq!(curve[1].coverage, 1.0);
    assert_relative_eq!(curve[1].accuracy, 0.5);
    assert_relative_eq!(selective_accuracy_auc(&set), 0.75, epsilon = 1e-15);
}

/// Selection-sort threshold sweep: for each coverage k, re-derive the
/// kept set from scratch by repeatedly extracting the most confident
/// remaining point, then score it with a fresh scan.
fn selective_oracle(set: &PredictionSet<f64>) -> (Vec<(f64, f64)>, f64) {
    let n = set.len();
    let conf = |i: usize| -> f64 {
        set.probs().row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    };
    let correct = |i: usize| -> bool {
        let row = set.probs().row(i);
        let mut best = 0;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        best == set.labels()[i]
    };
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut kept: Vec<usize> = Vec::new();
    let mut curve = Vec::new();
    for k in 1..=n {
        let (pos, _) = remaining
            .iter()
            .enumerate()
            .max_by(|(_, &a), (_, &b)| conf(a).total_cmp(&conf(b)).then(b.cmp(&a)))
            .unwrap();
        kept.push(remaining.remove(pos));
        let hits = kept.iter().filter(|&&i| correct(i)).count();
        curve.push((k as f64 / n as f64, hits as f64 / k as f64));
    }
    let auc = curve.iter().map(|&(_, a)| a).sum::<f64>() / n as f64;
    (curve, auc)
}

#[test]
fn selective_prediction_matches_the_threshold_sweep_oracle() {
    let mut rng = rng_from_seed(43);
    for trial in 0..100u64 {
        let n = rng.random_range(1..=200usize);
        let k = rng.random_range(2..=4usize);
        let set = random_set(n, k, 20_000 + trial);
        let (oracle_curve, oracle_auc) = selective_oracle(&set);
        let got_curve = selective_curve(&set);
        let got_auc = selective_accuracy_auc(&set);
        assert!((got_auc - oracle_auc).abs() < 1e-12, "trial {}", trial);
        for (got, want) in got_curve.iter().zip(&oracle_curve) {
            assert!((got.coverage - want.0).abs() < 1e-15);
            assert!((got.accuracy - want.1).abs() < 1e-12);
        }
    }
}

#[test]
fn the_full_coverage_point_is_the_overall_accuracy() {
    for seed in 0..20u64 {
        let set = random_set(37, 3, 30_000 + seed);
        let curve = selective_curve(&set);
        assert_eq!(curve.last().unwrap().accuracy, accuracy(&set));
    }
}

#[test]
fn separated_score_groups_give_a_perfect_ranking() {
    let high = vec![5.0, 6.0, 7.0];
    let low = vec![1.0, 2.0];
    assert_eq!(auroc(&high, &low).unwrap(), 1.0);
    assert_eq!(auroc(&low, &high).unwrap(), 0.0);
}

#[test]
fn identical_score_multisets_rank_at_chance() {
    let a = vec![0.3, 0.7, 0.7, 1.5];
    assert_relative_eq!(auroc(&a, &a).unwrap(), 0.5, epsilon = 1e-15);
}

/// O(n²) ranking oracle: count wins and half-ties over all pairs.
fn auroc_oracle(pos: &[f64], neg: &[f64]) -> f64 {
    let mut score = 0.0;
    for &p in pos {
        for &n in neg {
            if p > n {
                score += 1.0;
            } else if p == n {
                score += 0.5;
            }
        }
    }
    score / (pos.len() * neg.len()) as f64
}

#[test]
fn the_ranking_statistic_matches_the_pairwise_oracle() {
    let mut rng = rng_from_seed(44);
    for trial in 0..100 {
        let np = rng.random_range(1..=100usize);
        let nn = rng.random_range(1..=100usize);
        // Quantized scores force plenty of ties.
        let pos: Vec<f64> =
            (0..np).map(|_| (uniform::<f64, _>(&mut rng, 0.0, 1.0) * 8.0).round() / 8.0).collect();
        let neg: Vec<f64> = (0..nn)
            .map(|_| (uniform::<f64, _>(&mut rng, 0.0, 1.0) * 8.0).round() / 8.0 + 0.2)
            .collect();
        let got = auroc(&pos, &neg).unwrap();
        let want = auroc_oracle(&pos, &neg);
        assert!((got - want).abs() < 1e-12, "trial {}: {} vs {}", trial, got, want);
    }
}

#[test]
fn degenerate_ranking_inputs_are_rejected() {
    assert!(auroc(&[], &[1.0]).is_err());
    assert!(auroc(&[1.0], &[]).is_err());
    assert!(auroc(&[f64::NAN], &[1.0]).is_err());
}

#[test]
fn entropy_based_shift_detection_flags_the_more_uncertain_set() {
    // The shifted set is near-uniform (high entropy), the in-set is
    // confident: the detector should order them almost perfectly.
    let id = one_hot_set(&[0, 1, 0, 1], 2);
    let shifted = PredictionSet::new(
        Tensor::from_vec(vec![3, 2], vec![0.5, 0.5, 0.55, 0.45, 0.52, 0.48]).unwrap(),
        vec![0, 0, 0],
    )
    .unwrap();
    assert_eq!(entropy_ood_auroc(&id, &shifted).unwrap(), 1.0);
}

#[test]
fn report_fields_cross_check_each_other() {
    let set = random_set(80, 3, 55);
    let report = evaluate(&set, DEFAULT_ECE_BINS).unwrap();
    assert_eq!(report.accuracy, accuracy(&set));
    assert_eq!(report.nll, nll(&set));
    assert_eq!(report.ece, ece(&set, DEFAULT_ECE_BINS).unwrap());
    assert_eq!(report.selective_auc, selective_accuracy_auc(&set));
    assert_eq!(report.curve_points.last().unwrap().accuracy, report.accuracy);
    assert!(report.ood_auroc.is_none());
    assert!((0.0..=1.0).contains(&report.ece));
}

#[test]
fn grids_enumerate_points_row_major_with_the_last_axis_fastest() {
    let grid = GridSpec { lows: vec![0.0, 10.0], highs: vec![1.0, 12.0], steps: vec![2, 3] };
    let pts = grid.points::<f64>().unwrap();
    assert_eq!(pts.shape(), &[6, 2]);
    assert_eq!(pts.row(0), &[0.0, 10.0]);
    assert_eq!(pts.row(1), &[0.0, 11.0]);
    assert_eq!(pts.row(2), &[0.0, 12.0]);
    assert_eq!(pts.row(3), &[1.0, 10.0]);
    assert_eq!(pts.row(5), &[1.0, 12.0]);
}

#[test]
fn far_field_splits_respect_the_radius() {
    let config = MlpConfig {
        input_dim: 2,
        hidden_widths: vec![4],
        output_dim: 2,
        activation: Activation::Tanh,
        init_scheme: None,
    };
    let params = ModelParams::<f64>::init(&config, 3).unwrap();
    let train = Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let grid = GridSpec { lows: vec![-1.0, -1.0], highs: vec![1.0, 1.0], steps: vec![3, 3] };
    let points = grid.points::<f64>().unwrap();

    // A huge radius leaves the far side empty and reports it as such.
    let all_near = far_field_entropy(&params, &train, &points, 100.0).unwrap();
    assert_eq!(all_near.far_count, 0);
    assert!(all_near.far_mean.is_none());
    assert_eq!(all_near.near_count, 9);

    // Radius 1.1 keeps only the four corners (distance √2) far.
    let split = far_field_entropy(&params, &train, &points, 1.1).unwrap();
    assert_eq!(split.far_count, 4);
    assert_eq!(split.near_count, 5);
}

#[test]
fn a_uniform_predictor_has_log_k_entropy_everywhere() {
    let config = MlpConfig {
        input_dim: 2,
        hidden_widths: vec![4],
        output_dim: 3,
        activation: Activation::Tanh,
        init_scheme: None,
    };
    let mut params = ModelParams::<f64>::init(&config, 4).unwrap();
    for v in params.head.data_mut() {
        *v = 0.0;
    }
    let train = Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let grid = GridSpec { lows: vec![-2.0, -2.0], highs: vec![2.0, 2.0], steps: vec![4, 4] };
    let points = grid.points::<f64>().unwrap();
    let split = far_field_entropy(&params, &train, &points, 1.5).unwrap();
    let ln_k = 3.0f64.ln();
    assert_relative_eq!(split.far_mean.unwrap(), ln_k, epsilon = 1e-12);
    assert_relative_eq!(split.near_mean.unwrap(), ln_k, epsilon = 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Swapping the groups complements the statistic.
    #[test]
    fn ranking_is_antisymmetric(
        pos in proptest::collection::vec(0.0f64..1.0, 1..40),
        neg in proptest::collection::vec(0.0f64..1.0, 1..40),
        quantize in proptest::bool::ANY,
    ) {
        let q = |v: &[f64]| -> Vec<f64> {
            if quantize { v.iter().map(|x| (x * 4.0).round() / 4.0).collect() } else { v.to_vec() }
        };
        let (p, n) = (q(&pos), q(&neg));
        let forward = auroc(&p, &n).unwrap();
        let backward = auroc(&n, &p).unwrap();
        prop_assert!((forward + backward - 1.0).abs() < 1e-12);
    }
}
