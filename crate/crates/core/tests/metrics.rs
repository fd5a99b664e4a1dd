use proptest::prelude::*;
use rand::Rng;
use stainforge_core::metrics::{
    pca_project, quadratic_kappa, stain_invariance_probe, wilcoxon_exact, wilcoxon_normal, wilcoxon_rank_sum,
};
use stainforge_core::rng::seeded;

/// Weighted kappa straight from the confusion matrix.
fn kappa_oracle(pred: &[usize], truth: &[usize], k: usize) -> Option<f64> {
    let n = pred.len() as f64;
    let mut o = vec![vec![0.0; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        o[t][p] += 1.0;
    }
    let rows: Vec<f64> = o.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..k).map(|j| o.iter().map(|r| r[j]).sum()).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64 - j as f64) / (k as f64 - 1.0)).powi(2);
            num += w * o[i][j];
            den += w * rows[i] * cols[j] / n;
        }
    }
    (den != 0.0).then(|| 1.0 - num / den)
}

#[test]
fn kappa_matches_confusion_matrix_oracle() {
    let mut rng = seeded(21);
    for trial in 0..1000 {
        let k = 2 + trial % 3;
        let n = rng.random_range(1..60);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        match (quadratic_kappa(&pred, &truth, k), kappa_oracle(&pred, &truth, k)) {
            (Ok(a), Some(b)) => assert!((a - b).abs() <= 1e-12, "{a} vs {b}"),
            (Err(_), None) => {}
            (a, b) => panic!("disagreement on definedness: {a:?} vs {b:?}"),
        }
    }
}

#[test]
fn perfect_agreement_is_one() {
    let y = [0, 1, 2, 2, 1, 0];
    assert_eq!(quadratic_kappa(&y, &y, 3).unwrap(), 1.0);
}

fn naive_midranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let below = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Two-sided p by listing every split of the pooled sample.
fn enumerated_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = naive_midranks(&pooled);
    let observed: f64 = ranks[..a.len()].iter().sum();
    let (mut le, mut ge, mut total) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1 << pooled.len()) {
        if mask.count_ones() as usize != a.len() {
            continue;
        }
        let s: f64 = (0..pooled.len()).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        total += 1;
        if s <= observed + 1e-9 {
            le += 1;
        }
        if s >= observed - 1e-9 {
            ge += 1;
        }
    }
    (2.0 * le.min(ge) as f64 / total as f64).min(1.0)
}

#[test]
fn exact_wilcoxon_matches_enumeration() {
    let mut rng = seeded(22);
    for n in 3..=9 {
        for m in 3..=(12 - n) {
            for trial in 0..4 {
                // half the trials draw from a small set to force ties
                let mut draw = || {
                    if trial % 2 == 0 {
                        rng.random_range(0.0..1.0)
                    } else {
                        rng.random_range(0..4) as f64
                    }
                };
                let a: Vec<f64> = (0..n).map(|_| draw()).collect();
                let b: Vec<f64> = (0..m).map(|_| draw()).collect();
                let got = wilcoxon_rank_sum(&a, &b).unwrap();
                assert!(got.exact);
                let want = enumerated_p(&a, &b);
                assert!((got.p_value - want).abs() <= 1e-12, "n={n} m={m}: {} vs {want}", got.p_value);
            }
        }
    }
}

#[test]
fn normal_approximation_tracks_exact_at_six_six() {
    let mut rng = seeded(23);
    for _ in 0..100 {
        let a: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.random_range(0.3..1.3)).collect();
        let e = wilcoxon_exact(&a, &b).unwrap().p_value;
        let z = wilcoxon_normal(&a, &b).unwrap().p_value;
        assert!((e - z).abs() <= 0.02, "exact {e} normal {z}");
    }
}

#[test]
fn most_extreme_of_twenty_arrangements() {
    let r = wilcoxon_rank_sum(&[1.0, 2.0, 3.0], &[10.0, 11.0, 12.0]).unwrap();
    assert!((r.p_value - 0.1).abs() < 1e-12);
    let same = wilcoxon_rank_sum(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!(same.p_value >= 0.9);
}

#[test]
fn separated_samples_are_significant() {
    let a: Vec<f64> = (0..10).map(|i| 0.8 + i as f64 * 0.01).collect();
    let b: Vec<f64> = (0..10).map(|i| 0.5 + i as f64 * 0.01).collect();
    let r = wilcoxon_rank_sum(&a, &b).unwrap();
    assert!(!r.exact);
    assert!(r.p_value < 0.001);
}

#[test]
fn tiny_samples_are_rejected() {
    assert!(wilcoxon_rank_sum(&[1.0, 2.0], &[3.0, 4.0, 5.0]).is_err());
}

#[test]
fn pca_finds_dominant_axis() {
    let mut rng = seeded(24);
    let pts: Vec<Vec<f64>> = (0..200)
        .map(|_| {
            let t: f64 = rng.random_range(-3.0..3.0);
            vec![t, 2.0 * t + rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)]
        })
        .collect();
    let p = pca_project(&pts, 2).unwrap();
    let c = &p.components[0];
    let norm = (5f64).sqrt();
    assert!((c[0] - 1.0 / norm).abs() < 0.01 && (c[1] - 2.0 / norm).abs() < 0.01);
    assert!(p.explained[0] > 0.99);
}

#[test]
fn pca_rejects_constant_data() {
    assert!(pca_project(&vec![vec![1.0, 2.0]; 10], 2).is_err());
}

#[test]
fn probe_separates_shifted_centers_and_not_identical_ones() {
    let mut rng = seeded(25);
    let mut feats = Vec::new();
    let mut ids = Vec::new();
    for c in 0..3 {
        for _ in 0..40 {
            feats.push(vec![c as f64 * 3.0 + rng.random_range(-0.5..0.5), rng.random_range(-1.0..1.0)]);
            ids.push(c);
        }
    }
    let r = stain_invariance_probe(&feats, &ids).unwrap();
    assert!(r.accuracy > 0.95);
    let noise: Vec<Vec<f64>> = feats.iter().map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
    let r = stain_invariance_probe(&noise, &ids).unwrap();
    assert!(r.accuracy < 0.55, "{}", r.accuracy);
    assert!((r.chance - 1.0 / 3.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn kappa_is_at_most_one_and_symmetric(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 2..50)
    ) {
        let (p, t): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        if let (Ok(a), Ok(b)) = (quadratic_kappa(&p, &t, 4), quadratic_kappa(&t, &p, 4)) {
            prop_assert!(a <= 1.0 + 1e-12);
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wilcoxon_p_is_a_probability_and_symmetric(
        a in prop::collection::vec(-10.0f64..10.0, 3..15),
        b in prop::collection::vec(-10.0f64..10.0, 3..15),
    ) {
        let x = wilcoxon_rank_sum(&a, &b).unwrap().p_value;
        let y = wilcoxon_rank_sum(&b, &a).unwrap().p_value;
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_ignores_monotone_transforms(
        a in prop::collection::vec(-3.0f64..3.0, 3..10),
        b in prop::collection::vec(-3.0f64..3.0, 3..10),
    ) {
        let f = |v: &Vec<f64>| v.iter().map(|x| x.exp() * 2.0 + 1.0).collect::<Vec<_>>();
        let x = wilcoxon_rank_sum(&a, &b).unwrap().p_value;
        let y = wilcoxon_rank_sum(&f(&a), &f(&b)).unwrap().p_value;
        prop_assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn pca_coordinates_are_centred(
        pts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 4..30)
    ) {
        if let Ok(p) = pca_project(&pts, 2) {
            for d in 0..2 {
                let m: f64 = p.coordinates.iter().map(|c| c[d]).sum::<f64>() / pts.len() as f64;
                prop_assert!(m.abs() < 1e-9);
            }
            let total: f64 = p.explained.iter().sum();
            prop_assert!(total <= 1.0 + 1e-9);
        }
    }
}
