mod common;

use common::oracle::{auroc_pairs, dpm_counting, eom_counting, pqd_accuracy_counting, transport_w1};
use ndarray::Array2;
use rand::Rng;
use udakit::metrics::{auroc, dpm, eom, eom_detailed, pqd, PredictionSet, QualityBasis};
use udakit::shift::{chi_square, pearson, sliced_wasserstein, wasserstein_1d};

#[test]
fn auroc_matches_pair_counting() {
    let mut r = common::rng(11);
    let mut checked = 0;
    while checked < 100 {
        let n = r.random_range(2..=200);
        // coarse scores so that ties are common
        let levels = r.random_range(2..=50);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
        let positive: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        match auroc_pairs(&scores, &positive) {
            Some(expected) => {
                let got = auroc(&scores, &positive).unwrap();
                assert!((got - expected).abs() <= 1e-12, "n={n}: {got} vs {expected}");
                checked += 1;
            }
            None => assert!(auroc(&scores, &positive).is_err()),
        }
    }
}

#[test]
fn auroc_handles_continuous_scores() {
    let mut r = common::rng(12);
    for _ in 0..100 {
        let n = r.random_range(2..=200);
        let scores: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let positive: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        if let Some(expected) = auroc_pairs(&scores, &positive) {
            assert!((auroc(&scores, &positive).unwrap() - expected).abs() <= 1e-12);
        }
    }
}

/// Compares the library against direct counting on one labelled instance.
fn compare_fairness(y: &[usize], yhat: &[usize], s: &[usize], m: usize, groups: usize) {
    let p = PredictionSet::new(y.to_vec(), yhat.to_vec(), None, s.to_vec(), m, groups).unwrap();
    match dpm_counting(yhat, s, m, groups) {
        Some(expected) => assert_eq!(dpm(&p).unwrap(), expected, "dpm {y:?} {yhat:?} {s:?}"),
        None => assert!(dpm(&p).is_err()),
    }
    match eom_counting(y, yhat, s, m, groups) {
        Some(expected) => assert_eq!(eom(&p).unwrap(), expected, "eom {y:?} {yhat:?} {s:?}"),
        None => assert!(eom(&p).is_err()),
    }
    match pqd_accuracy_counting(y, yhat, s, groups) {
        Some(expected) => {
            assert_eq!(pqd(&p, QualityBasis::Accuracy).unwrap(), expected, "pqd {y:?} {yhat:?} {s:?}")
        }
        None => assert!(pqd(&p, QualityBasis::Accuracy).is_err()),
    }
}

/// Every assignment of (label, prediction, group) to `n` items.
fn exhaustive(n: usize, m: usize, groups: usize) -> usize {
    let per_item = m * m * groups;
    let total = per_item.pow(n as u32);
    for mut code in 0..total {
        let (mut y, mut yhat, mut s) = (vec![0; n], vec![0; n], vec![0; n]);
        for i in 0..n {
            let c = code % per_item;
            code /= per_item;
            y[i] = c % m;
            yhat[i] = (c / m) % m;
            s[i] = c / (m * m);
        }
        compare_fairness(&y, &yhat, &s, m, groups);
    }
    total
}

#[test]
fn fairness_metrics_match_counting_exhaustively() {
    let mut cases = 0;
    cases += exhaustive(4, 2, 2);
    cases += exhaustive(3, 3, 2);
    cases += exhaustive(3, 2, 3);
    cases += exhaustive(3, 3, 3);
    cases += exhaustive(5, 2, 1);
    assert!(cases > 30_000);
}

#[test]
fn fairness_metrics_match_counting_on_random_instances() {
    let mut r = common::rng(13);
    for _ in 0..2000 {
        let n = r.random_range(1..=30);
        let m = r.random_range(2..=3);
        let groups = r.random_range(1..=3);
        let y: Vec<usize> = (0..n).map(|_| r.random_range(0..m)).collect();
        // mostly-correct predictions give a realistic spread of ratios
        let yhat: Vec<usize> = y
            .iter()
            .map(|&c| if r.random_bool(0.7) { c } else { r.random_range(0..m) })
            .collect();
        let s: Vec<usize> = (0..n).map(|_| r.random_range(0..groups)).collect();
        compare_fairness(&y, &yhat, &s, m, groups);
    }
}

#[test]
fn auroc_pqd_matches_per_group_pair_counting() {
    let mut r = common::rng(14);
    for _ in 0..200 {
        let n = r.random_range(8..=30);
        let y: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        let scores: Vec<f64> = y.iter().map(|&c| (c as f64 * 0.3 + r.random::<f64>()) / 1.3).collect();
        let yhat: Vec<usize> = scores.iter().map(|&v| (v >= 0.5) as usize).collect();
        let s: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        let p = PredictionSet::new(y.clone(), yhat, Some(scores.clone()), s.clone(), 2, 2).unwrap();
        let per_group: Option<Vec<f64>> = (0..2)
            .map(|g| {
                let idx: Vec<usize> = (0..n).filter(|&i| s[i] == g).collect();
                let sc: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                let pos: Vec<bool> = idx.iter().map(|&i| y[i] == 1).collect();
                auroc_pairs(&sc, &pos)
            })
            .collect();
        match per_group {
            Some(q) => {
                let expected = q[0].min(q[1]) / q[0].max(q[1]);
                let got = pqd(&p, QualityBasis::Auroc).unwrap();
                assert!((got - expected).abs() <= 1e-12);
            }
            None => assert!(pqd(&p, QualityBasis::Auroc).is_err()),
        }
    }
}

#[test]
fn strict_eom_rejects_partially_missing_classes() {
    // class 2 appears only in group 0
    let p = PredictionSet::new(vec![0, 1, 2, 0, 1], vec![0, 1, 2, 0, 0], None, vec![0, 0, 0, 1, 1], 3, 2).unwrap();
    let lenient = eom_detailed(&p, false).unwrap();
    assert_eq!(lenient.skipped_classes, vec![2]);
    assert_eq!(lenient.value, (1.0 + 0.0) / 2.0);
    assert!(eom_detailed(&p, true).is_err());
}

#[test]
fn dpm_hand_fixture() {
    // group 0 predicts class 1 at 0.6, group 1 at 0.3
    let s = [vec![0; 10], vec![1; 10]].concat();
    let mut yhat = vec![0; 20];
    yhat[..6].fill(1);
    yhat[10..13].fill(1);
    let p = PredictionSet::new(vec![0; 20], yhat, None, s, 2, 2).unwrap();
    assert!((dpm(&p).unwrap() - (0.5 + 4.0 / 7.0) / 2.0).abs() < 1e-12);
}

fn cloud(r: &mut rand_chacha::ChaCha8Rng, n: usize, dim: usize, shift: &[f64]) -> Array2<f64> {
    let mut x = common::normal_matrix(r, n, dim, 1.0);
    for mut row in x.rows_mut() {
        for (v, s) in row.iter_mut().zip(shift) {
            *v += s;
        }
    }
    x
}

#[test]
fn exact_1d_wasserstein_matches_transport() {
    let mut r = common::rng(15);
    for _ in 0..50 {
        let n = r.random_range(1..=40);
        let m = r.random_range(1..=40);
        let a = cloud(&mut r, n, 1, &[0.0]);
        let offset = r.random_range(-2.0..2.0);
        let b = cloud(&mut r, m, 1, &[offset]);
        let expected = transport_w1(&a, &b);
        let got = wasserstein_1d(a.column(0).as_slice().unwrap(), b.column(0).as_slice().unwrap()).unwrap();
        assert!((got - expected).abs() <= 1e-9 * expected.max(1.0), "{got} vs {expected}");
        // any projection count gives the exact value in one dimension
        assert_eq!(sliced_wasserstein(a.view(), b.view(), 1, 0).unwrap(), got);
    }
}

#[test]
fn sliced_wasserstein_within_fifteen_percent_of_transport() {
    let mut r = common::rng(16);
    let mut worst: f64 = 0.0;
    for trial in 0..30 {
        let dim = 1 + trial % 3;
        let n = r.random_range(24..=64);
        let m = r.random_range(24..=64);
        let mut shift: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let norm = shift.iter().map(|v| v * v).sum::<f64>().sqrt();
        let length = r.random_range(3.0..6.0);
        shift.iter_mut().for_each(|v| *v *= length / norm);
        let a = cloud(&mut r, n, dim, &vec![0.0; dim]);
        let b = cloud(&mut r, m, dim, &shift);
        let expected = transport_w1(&a, &b);
        let got = sliced_wasserstein(a.view(), b.view(), 256, trial as u64).unwrap();
        let rel = (got - expected).abs() / expected;
        worst = worst.max(rel);
        assert!(rel <= 0.15, "dim {dim}, n={n}, m={m}: sliced {got} vs transport {expected}");
    }
    println!("worst relative deviation {worst:.3}");
}

#[test]
fn sliced_wasserstein_is_exact_for_translations() {
    let mut r = common::rng(17);
    for dim in 2..=3 {
        let a = cloud(&mut r, 40, dim, &vec![0.0; dim]);
        let v: Vec<f64> = (0..dim).map(|_| r.random_range(-3.0..3.0)).collect();
        let shifted = &a + &ndarray::Array1::from(v.clone());
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((transport_w1(&a, &shifted) - norm).abs() < 1e-9);
        // 4096 directions: Monte-Carlo error well under 5%
        let got = sliced_wasserstein(a.view(), shifted.view(), 4096, 3).unwrap();
        assert!((got - norm).abs() / norm < 0.05, "{got} vs {norm}");
    }
}

#[test]
fn more_projections_do_not_increase_deviation() {
    let mut r = common::rng(18);
    let a = cloud(&mut r, 48, 3, &[0.0, 0.0, 0.0]);
    let b = cloud(&mut r, 48, 3, &[3.0, 1.0, -2.0]);
    let exact = transport_w1(&a, &b);
    let mad = |projections: usize| {
        (0..20)
            .map(|t| (sliced_wasserstein(a.view(), b.view(), projections, 100 + t).unwrap() - exact).abs())
            .sum::<f64>()
            / 20.0
    };
    // the estimator's spread around its mean shrinks, so the deviation
    // from the transport value cannot grow
    assert!(mad(512) <= mad(256) + 1e-12);
    assert!(mad(256) <= mad(128) + 1e-12);
}

#[test]
fn chi_square_fixtures() {
    assert!((chi_square(&[0.5, 0.5], &[0.25, 0.75], 1e-12).unwrap() - 1.0 / 3.0).abs() < 1e-9);
    assert_eq!(chi_square(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5], 1e-6).unwrap(), 0.0);
    // (0.1² / 0.4) + (0.1² / 0.6)
    let v = chi_square(&[0.5, 0.5], &[0.4, 0.6], 1e-12).unwrap();
    assert!((v - (0.01 / 0.4 + 0.01 / 0.6)).abs() < 1e-9);
    // asymmetric
    assert!((chi_square(&[0.25, 0.75], &[0.5, 0.5], 1e-12).unwrap() - 0.25).abs() < 1e-9);
}

#[test]
fn pearson_fixtures() {
    assert!((pearson(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap() - 0.6).abs() < 1e-9);
    assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-9);
    assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    assert!(pearson(&[1.0], &[1.0]).is_err());
}
