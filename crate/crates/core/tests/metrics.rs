use std::time::Instant;

use hcl_core::metrics::{
    cosine_similarity, linear_probe, project_2d, projection_matrix, uniformity_g, uniformity_positive, write_report,
    ProbeConfig, Projection, ReportRow,
};
use hcl_core::rng::{domain, substream, Rng};
use hcl_core::{Error, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;

/// Plain double loop over `i < j`.
fn brute_force_g(rows: &[Vec<f64>], t: f64) -> f64 {
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..unit.len() {
        for j in i + 1..unit.len() {
            let d2: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| (a - b).powi(2)).sum();
            sum += (-t * d2).exp();
            pairs += 1;
        }
    }
    sum / pairs as f64
}

/// `I_0(x) = sum_k (x/2)^(2k) / (k!)^2`.
fn bessel_i0(x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..60 {
        term *= (x / 2.0).powi(2) / (k * k) as f64;
        sum += term;
    }
    sum
}

fn random_rows(n: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn uniform_circle_potential() {
    // Two uniform angles differ by a uniform angle; |u - v|^2 = 2 - 2 cos(theta).
    let analytic = (-4.0f64).exp() * bessel_i0(4.0);
    assert!((analytic - 0.2070).abs() < 5e-5, "{analytic}");

    let mut rng = substream(0, domain::EVAL, &[]);
    let rows: Vec<Vec<f64>> = (0..10_000)
        .map(|_| {
            let a = rng.gen::<f64>() * std::f64::consts::TAU;
            vec![a.cos(), a.sin()]
        })
        .collect();
    let start = Instant::now();
    let g = uniformity_g(&Tensor::from_rows(&rows).unwrap(), 2.0).unwrap();
    assert!(start.elapsed().as_secs_f64() < 10.0);
    assert!((g.g_value - 0.2070).abs() < 0.002, "{}", g.g_value);
    assert!((g.g_value - analytic).abs() < 0.002);
    assert_eq!(g.sample_count, 10_000);
}

#[test]
fn uniformity_small_cases() {
    let same = Tensor::from_rows(&vec![vec![0.3, -2.0, 1.0]; 5]).unwrap();
    for t in [0.5, 2.0, 7.0] {
        assert_eq!(uniformity_g(&same, t).unwrap().g_value, 1.0);
    }
    let antipodal = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
    assert!((uniformity_g(&antipodal, 2.0).unwrap().g_value - (-8.0f64).exp()).abs() < 1e-15);
    assert!(uniformity_g(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), 2.0).is_err());
    assert!(uniformity_g(&antipodal, 0.0).is_err());

    let b = Tensor::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
    let pos = uniformity_positive(&antipodal, &b, 2.0).unwrap();
    assert!((pos.g_value - ((-4.0f64).exp() + 1.0) / 2.0).abs() < 1e-15);
}

#[test]
fn cosine_examples() {
    assert!((cosine_similarity(&[3.0, -1.0, 2.0], &[3.0, -1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
    assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
}

#[test]
fn projection_examples() {
    let x = Tensor::from_rows(&[vec![3.0, 4.0], vec![-2.0, 0.0]]).unwrap();
    let p = project_2d(&x, Projection::Identity, 0).unwrap();
    assert_eq!(p.data(), &[0.6, 0.8, -1.0, 0.0]);
    assert_eq!(projection_matrix(5, 9), projection_matrix(5, 9));
    assert_ne!(projection_matrix(5, 9), projection_matrix(5, 10));
    assert!(project_2d(&Tensor::from_rows(&[vec![1.0]]).unwrap(), Projection::Random, 0).is_err());
}

#[test]
fn report_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    let rows = [
        ReportRow { metric: "sim_qk".into(), value: 0.5, t: None, n_samples: 3 },
        ReportRow { metric: "uniformity".into(), value: 0.25, t: Some(2.0), n_samples: 3 },
    ];
    write_report(&path, &rows).unwrap();
    assert_eq!(
        std::fs::read_to_string(&path).unwrap(),
        "metric,value,t,n_samples\nsim_qk,0.5,,3\nuniformity,0.25,2,3\n"
    );
}

#[test]
fn probe_on_one_hot_features_is_perfect() {
    let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
    let rows: Vec<Vec<f64>> = labels.iter().map(|&l| (0..4).map(|c| f64::from(u8::from(c == l))).collect()).collect();
    let features = Tensor::from_rows(&rows).unwrap();
    let copy = features.clone();
    let r = linear_probe(&features, &labels, 4, &ProbeConfig::default(), 1).unwrap();
    assert_eq!(r.top1, 1.0);
    assert!(r.per_class.iter().flatten().all(|&a| a == 1.0));
    assert_eq!(r.epochs, 100);
    assert_eq!(features, copy);
}

#[test]
fn probe_on_shuffled_labels_is_at_chance() {
    let mut rng = substream(2, domain::EVAL, &[]);
    let n = 4000;
    let mut labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let rows: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| (0..8).map(|c| if c == l { 1.0 } else { 0.0 } + rng.gen_range(-0.1..0.1)).collect())
        .collect();
    labels.shuffle(&mut rng);
    let features = Tensor::from_rows(&rows).unwrap();
    let copy = features.clone();
    let cfg = ProbeConfig { epochs: 20, ..ProbeConfig::default() };
    let r = linear_probe(&features, &labels, 4, &cfg, 3).unwrap();
    assert!((r.top1 - 0.25).abs() < 0.05, "{}", r.top1);
    assert_eq!(features, copy);
}

#[test]
fn probe_rejects_mismatched_labels() {
    let f = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
    assert!(linear_probe(&f, &[0, 1], 2, &ProbeConfig::default(), 0).is_err());
    assert!(linear_probe(&f, &[0, 1, 5], 2, &ProbeConfig::default(), 0).is_err());
}

fn random_rotation(d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    // Gram-Schmidt on a random matrix.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matches_brute_force(n in 2usize..=200, d in 1usize..6, t in 0.1f64..5.0, seed in any::<u64>()) {
        let rows = random_rows(n, d, &mut substream(seed, domain::EVAL, &[]));
        prop_assume!(rows.iter().all(|r| r.iter().any(|v| v.abs() > 1e-6)));
        let g = uniformity_g(&Tensor::from_rows(&rows).unwrap(), t).unwrap();
        prop_assert!((g.g_value - brute_force_g(&rows, t)).abs() < 1e-12);
        prop_assert!(g.g_value > 0.0 && g.g_value <= 1.0);
    }

    #[test]
    fn invariant_under_rotation_and_permutation(n in 2usize..60, d in 2usize..6, seed in any::<u64>()) {
        let mut rng = substream(seed, domain::EVAL, &[]);
        let mut rows = random_rows(n, d, &mut rng);
        prop_assume!(rows.iter().all(|r| r.iter().any(|v| v.abs() > 1e-6)));
        let base = uniformity_g(&Tensor::from_rows(&rows).unwrap(), 2.0).unwrap().g_value;
        let rot = random_rotation(d, &mut rng);
        let rotated: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| rot.iter().map(|b| b.iter().zip(r).map(|(x, y)| x * y).sum()).collect())
            .collect();
        let g_rot = uniformity_g(&Tensor::from_rows(&rotated).unwrap(), 2.0).unwrap().g_value;
        prop_assert!((g_rot - base).abs() < 1e-12);
        rows.shuffle(&mut rng);
        let g_perm = uniformity_g(&Tensor::from_rows(&rows).unwrap(), 2.0).unwrap().g_value;
        prop_assert!((g_perm - base).abs() < 1e-12);
    }

    #[test]
    fn cosine_ignores_positive_scale(q in prop::collection::vec(-5.0f64..5.0, 4), k in prop::collection::vec(-5.0f64..5.0, 4), a in 1e-3f64..1e3, b in 1e-3f64..1e3) {
        prop_assume!(q.iter().any(|v| v.abs() > 1e-3) && k.iter().any(|v| v.abs() > 1e-3));
        let c = cosine_similarity(&q, &k).unwrap();
        let qs: Vec<f64> = q.iter().map(|v| v * a).collect();
        let ks: Vec<f64> = k.iter().map(|v| v * b).collect();
        prop_assert!((cosine_similarity(&qs, &ks).unwrap() - c).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn projections_are_unit_norm(n in 1usize..20, d in 2usize..10, seed in any::<u64>()) {
        let rows = random_rows(n, d, &mut substream(seed, domain::EVAL, &[]));
        match project_2d(&Tensor::from_rows(&rows).unwrap(), Projection::Random, seed) {
            Ok(p) => {
                for r in p.rows() {
                    prop_assert!((r[0].hypot(r[1]) - 1.0).abs() < 1e-12);
                }
            }
            Err(e) => {
                let zero_norm = matches!(e, Error::ZeroNorm { .. });
                prop_assert!(zero_norm);
            }
        }
    }
}
