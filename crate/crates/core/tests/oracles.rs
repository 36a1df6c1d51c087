//! Brute-force and finite-difference oracles for the metric and network code.

use crowd_calib::estimator::{Head, MlpConfig, MlpModel, Targets};
use crowd_calib::evaluation::{auc_accuracy_coverage, auroc_values, cov_at_acc, ece_from_confidences, sweep_values};
use crowd_calib::ProbDist;
use proptest::prelude::*;

/// Coverage and accuracy when keeping everything scoring at least `t`.
fn keep_at(keep: &[f64], correct: &[bool], t: f64) -> (f64, f64) {
    let kept: Vec<bool> = keep
        .iter()
        .zip(correct)
        .filter(|(k, _)| **k >= t)
        .map(|(_, c)| *c)
        .collect();
    let hits = kept.iter().filter(|c| **c).count();
    (kept.len() as f64 / keep.len() as f64, hits as f64 / kept.len() as f64)
}

fn pair_count_auroc(keep: &[f64], correct: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &ci) in correct.iter().enumerate() {
        for (j, &cj) in correct.iter().enumerate() {
            if ci && !cj {
                pairs += 1.0;
                if keep[i] > keep[j] {
                    wins += 1.0;
                } else if keep[i] == keep[j] {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

fn instance(max_n: usize, levels: u32) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1..=max_n).prop_flat_map(move |n| {
        (
            prop::collection::vec((0..levels).prop_map(|v| v as f64 / 4.0), n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

proptest! {
    #[test]
    fn sweep_matches_exhaustive_thresholds((keep, correct) in instance(20, 8)) {
        let curve = sweep_values(&keep, &correct, &vec![0.0; keep.len()]).unwrap();
        let mut thresholds = keep.clone();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        prop_assert_eq!(curve.points.len(), thresholds.len() + 1);
        for (p, &t) in curve.points.iter().zip(&thresholds) {
            let (cov, acc) = keep_at(&keep, &correct, t);
            prop_assert_eq!(p.threshold, t);
            prop_assert_eq!(p.coverage, cov);
            prop_assert_eq!(p.accuracy, Some(acc));
        }

        // exhaustive Cov@Acc and normalized trapezoid
        for target in [0.5, 0.75, 1.0] {
            let best = thresholds
                .iter()
                .map(|&t| keep_at(&keep, &correct, t))
                .filter(|(_, a)| *a >= target)
                .map(|(c, _)| c)
                .fold(None, |b: Option<f64>, c| Some(b.map_or(c, |b| b.max(c))));
            prop_assert_eq!(cov_at_acc(&curve, target), best);
        }
        let pts: Vec<(f64, f64)> = thresholds.iter().map(|&t| keep_at(&keep, &correct, t)).collect();
        let span = pts.last().unwrap().0 - pts[0].0;
        let expected = if span == 0.0 {
            pts[0].1
        } else {
            pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum::<f64>() / span
        };
        prop_assert_eq!(auc_accuracy_coverage(&curve), expected);
    }

    #[test]
    fn auroc_matches_pair_counting((keep, correct) in instance(200, 30)) {
        let fast = auroc_values(&keep, &correct).unwrap();
        match (fast, pair_count_auroc(&keep, &correct)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn area_metrics_ignore_monotone_transforms((keep, correct) in instance(40, 10)) {
        let squashed: Vec<f64> = keep.iter().map(|k| (3.0 * k - 1.0).tanh()).collect();
        let z = vec![0.0; keep.len()];
        let a = sweep_values(&keep, &correct, &z).unwrap();
        let b = sweep_values(&squashed, &correct, &z).unwrap();
        prop_assert_eq!(auc_accuracy_coverage(&a), auc_accuracy_coverage(&b));
        prop_assert_eq!(auroc_values(&keep, &correct).unwrap(), auroc_values(&squashed, &correct).unwrap());
    }

    /// Any scoring that only separates samples into two levels cannot beat
    /// the oracle split into correct and incorrect.
    #[test]
    fn oracle_beats_two_level_scorings(
        (levels, correct) in (2usize..30).prop_flat_map(|n| (
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(any::<bool>(), n),
        ))
    ) {
        let keep: Vec<f64> = levels.iter().map(|&h| h as u8 as f64).collect();
        let oracle: Vec<f64> = correct.iter().map(|&c| c as u8 as f64).collect();
        let z = vec![0.0; keep.len()];
        let other = auc_accuracy_coverage(&sweep_values(&keep, &correct, &z).unwrap());
        let best = auc_accuracy_coverage(&sweep_values(&oracle, &correct, &z).unwrap());
        prop_assert!(best + 1e-12 >= other, "oracle {} < {}", best, other);
        if correct.iter().any(|&c| c) && correct.iter().any(|&c| !c) {
            prop_assert_eq!(auroc_values(&oracle, &correct).unwrap(), Some(1.0));
        }
    }

    #[test]
    fn cov_at_acc_is_non_increasing_in_target((keep, correct) in instance(30, 10)) {
        let curve = sweep_values(&keep, &correct, &vec![0.0; keep.len()]).unwrap();
        let mut prev = f64::INFINITY;
        for i in 0..=20 {
            let c = cov_at_acc(&curve, i as f64 / 20.0).unwrap_or(0.0);
            prop_assert!(c <= prev);
            prev = c;
        }
    }
}

#[test]
fn ece_vanishes_on_a_perfectly_calibrated_fixture() {
    // 20 samples per bin at confidence c with exactly 20c correct
    let mut conf = Vec::new();
    let mut correct = Vec::new();
    for (c, hits) in [(0.55, 11), (0.65, 13), (0.75, 15), (0.85, 17), (0.95, 19)] {
        for i in 0..20 {
            conf.push(c);
            correct.push(i < hits);
        }
    }
    assert!(ece_from_confidences(&conf, &correct, 10).unwrap().abs() < 1e-9);
}

fn finite_difference_check(head: Head, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let config = MlpConfig {
        hidden_sizes: vec![5, 4],
        head,
        l2: 0.01,
        seed,
        ..MlpConfig::default()
    };
    let model = MlpModel::init(config, 3, 3).unwrap();
    let xs: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let ys: Vec<ProbDist> = (0..6)
        .map(|_| {
            ProbDist::from_weights(&[
                rng.random_range(0.1..1.0),
                rng.random_range(0.1..1.0),
                rng.random_range(0.1..1.0),
            ])
            .unwrap()
        })
        .collect();
    let (_, grad) = model.loss_and_gradient(&xs, Targets::Dists(&ys)).unwrap();
    let params = model.params();
    let patterns: Vec<_> = xs.iter().map(|x| model.activation_pattern(x).unwrap()).collect();
    let h = 1e-6;
    for i in 0..params.len() {
        let eval = |delta: f64| {
            let mut p = params.clone();
            p[i] += delta;
            let mut m = model.clone();
            m.set_params(&p).unwrap();
            let same = xs
                .iter()
                .zip(&patterns)
                .all(|(x, pat)| &m.activation_pattern(x).unwrap() == pat);
            (m.loss_and_gradient(&xs, Targets::Dists(&ys)).unwrap().0, same)
        };
        let ((up, same_up), (down, same_down)) = (eval(h), eval(-h));
        if !(same_up && same_down) {
            continue;
        }
        let numeric = (up - down) / (2.0 * h);
        let rel = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-6);
        assert!(rel < 1e-4, "param {i}: analytic {} numeric {numeric}", grad[i]);
    }
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..5 {
        finite_difference_check(Head::ClassifierSoftmax, seed);
        finite_difference_check(Head::RegressorLinear, seed);
    }
}
