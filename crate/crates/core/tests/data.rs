use hcl_core::data::{
    augment_batch, augment_pair, augment_pair_traced, center_crop, center_crop_region, center_suppressed_crop,
    parse_cifar, sample_beta, synthetic_records, AugmentConfig, CropRegion, Image,
};
use hcl_core::rng::{domain, substream};
use proptest::prelude::*;
use rand::Rng as _;

/// `integral_0^b x^(a-1) (1-x)^(a-1) dx`, via `x = u^(1/a)` which removes the singularity at 0.
fn beta_partial(a: f64, b: f64) -> f64 {
    let top = b.powf(a);
    let n = 20_000;
    let h = top / n as f64;
    let g = |u: f64| (1.0 - u.powf(1.0 / a)).powf(a - 1.0) / a;
    // Simpson's rule
    let mut s = g(0.0) + g(top);
    for i in 1..n {
        s += g(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn beta_cdf(a: f64, x: f64) -> f64 {
    beta_partial(a, x) / (2.0 * beta_partial(a, 0.5))
}

fn draws(alpha: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = substream(seed, domain::EVAL, &[]);
    (0..n).map(|_| sample_beta(alpha, &mut rng).unwrap()).collect()
}

#[test]
fn beta_oracle_sanity() {
    // Beta(0.5, 0.5) is the arcsine law: CDF(x) = 2/pi asin(sqrt(x)).
    let exact = 2.0 / std::f64::consts::PI * 0.1f64.sqrt().asin();
    assert!((beta_cdf(0.5, 0.1) - exact).abs() < 1e-6);
    assert!((beta_cdf(0.6, 0.5) - 0.5).abs() < 1e-12);
}

#[test]
fn beta_tail_mass_matches_integrated_density() {
    let xs = draws(0.6, 100_000, 1);
    let tail = xs.iter().filter(|&&x| !(0.1..=0.9).contains(&x)).count() as f64 / xs.len() as f64;
    let oracle = 2.0 * beta_cdf(0.6, 0.1);
    assert!((tail - oracle).abs() < 0.01, "tail {tail} vs {oracle}");
}

#[test]
fn beta_moments() {
    let xs = draws(0.6, 100_000, 2);
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    assert!((mean - 0.5).abs() < 0.01);
    assert!(xs.iter().all(|x| (0.0..=1.0).contains(x)));

    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let mut rng = substream(2, domain::EVAL, &[1]);
    let us: Vec<f64> = (0..xs.len()).map(|_| rng.gen()).collect();
    let um = us.iter().sum::<f64>() / n;
    let uvar = us.iter().map(|x| (x - um).powi(2)).sum::<f64>() / n;
    assert!(var > uvar, "{var} <= {uvar}");
    assert!((var - 1.0 / (4.0 * 2.2)).abs() < 0.005);
}

fn checker(h: usize, w: usize) -> Image {
    let px = (0..h * w * 3).map(|i| ((i * 37) % 251) as u8).collect();
    Image::new(h, w, px).unwrap()
}

fn center_distance(r: &CropRegion, side: f64) -> f64 {
    let cy = r.top as f64 + r.height as f64 / 2.0;
    let cx = r.left as f64 + r.width as f64 / 2.0;
    (cy - side / 2.0).hypot(cx - side / 2.0)
}

#[test]
fn crop_centers_are_pushed_away_from_the_middle() {
    let img = checker(32, 32);
    let cfg = AugmentConfig {
        scale_range: [0.25, 0.25],
        aspect_range: [1.0, 1.0],
        ..AugmentConfig::default()
    };
    let mut rng = substream(5, domain::EVAL, &[]);
    let mut suppressed = 0.0;
    for _ in 0..10_000 {
        let (region, out) = center_suppressed_crop(&img, &cfg, &mut rng).unwrap();
        assert_eq!((region.height, region.width), (16, 16));
        assert_eq!((out.height(), out.width()), (32, 32));
        suppressed += center_distance(&region, 32.0);
    }
    // Same 16x16 crop with the offset drawn uniformly over the feasible range.
    let mut uniform = 0.0;
    for _ in 0..10_000 {
        let top = (rng.gen::<f64>() * 16.0).round() as usize;
        let left = (rng.gen::<f64>() * 16.0).round() as usize;
        uniform += center_distance(&CropRegion { top, left, height: 16, width: 16 }, 32.0);
    }
    assert!(suppressed > uniform * 1.05, "{suppressed} vs {uniform}");
}

#[test]
fn center_crop_examples() {
    assert_eq!(
        center_crop_region(32, 32, 0.5).unwrap(),
        CropRegion { top: 8, left: 8, height: 16, width: 16 }
    );
    let img = checker(32, 32);
    let c = center_crop(&img, 0.5).unwrap();
    // rows and columns 8..=23
    assert_eq!(c.pixel(0, 0), img.pixel(8, 8));
    assert_eq!(c.pixel(15, 15), img.pixel(23, 23));
    assert_eq!(center_crop(&img, 1.0).unwrap(), img);
    assert!(center_crop(&img, 0.01).is_err());
}

#[test]
fn cifar_records() {
    let mut one = vec![7u8];
    one.extend((0..1024).map(|i| (i % 256) as u8));
    one.extend([100u8; 1024]);
    one.extend([200u8; 1024]);
    let recs = parse_cifar(&one).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].label, 7);
    // R plane first, then G, then B.
    assert_eq!(recs[0].image.pixel(0, 1), [1, 100, 200]);
    assert_eq!(recs[0].image.pixel(31, 31), [255, 100, 200]);

    let two = [one.clone(), one.clone()].concat();
    assert_eq!(parse_cifar(&two).unwrap().len(), 2);
    assert!(parse_cifar(&one[..3072]).is_err());
}

/// Nearest-centroid classification on raw pixels: a linear decision rule.
#[test]
fn synthetic_classes_are_linearly_separable_in_pixels() {
    let recs = synthetic_records(4, 100, 3).unwrap();
    let dim = 32 * 32 * 3;
    let mut means = vec![vec![0.0; dim]; 4];
    for r in &recs {
        for (m, &p) in means[r.label as usize].iter_mut().zip(r.image.pixels()) {
            *m += f64::from(p) / 100.0;
        }
    }
    let correct = recs
        .iter()
        .filter(|r| {
            let dist = |m: &Vec<f64>| -> f64 {
                m.iter().zip(r.image.pixels()).map(|(a, &b)| (a - f64::from(b)).powi(2)).sum()
            };
            let best = (0..4).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap();
            best == r.label as usize
        })
        .count();
    assert!(correct as f64 / recs.len() as f64 >= 0.95, "{correct} / 400");
}

#[test]
fn identity_augmentation_gives_resized_input() {
    let img = checker(20, 20);
    let cfg = AugmentConfig::identity(24);
    let (x1, x2) = augment_pair(&img, &cfg, &mut substream(0, domain::AUGMENT, &[])).unwrap();
    assert_eq!(x1, x2);
    assert_eq!(x1, img.resized(24, 24).unwrap());
}

#[test]
fn batch_augmentation_ignores_thread_count() {
    let recs = synthetic_records(2, 6, 4).unwrap();
    let imgs: Vec<&Image> = recs.iter().map(|r| &r.image).collect();
    let ids: Vec<u64> = (0..imgs.len() as u64).rev().collect();
    let cfg = AugmentConfig::default();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| augment_batch(&imgs, &ids, &cfg, 11, 3)).unwrap()
    };
    let a = run(1);
    assert_eq!(a, run(3));
    // Sample i depends only on its own id, not on its position in the batch.
    let single = augment_batch(&imgs[2..3], &ids[2..3], &cfg, 11, 3).unwrap();
    assert_eq!(single.0[0], a.0[2]);
    assert_eq!(single.1[0], a.1[2]);
}

fn any_image() -> impl Strategy<Value = Image> {
    (4usize..24, 4usize..24, any::<u64>()).prop_map(|(h, w, s)| {
        let mut rng = substream(s, domain::EVAL, &[]);
        Image::new(h, w, (0..h * w * 3).map(|_| rng.gen()).collect()).unwrap()
    })
}

fn any_config() -> impl Strategy<Value = AugmentConfig> {
    (0.3f64..=1.0, 0.05f64..0.95, 4usize..20, 0.05f64..1.0, 0.0f64..1.0, any::<bool>()).prop_map(
        |(p, alpha, out_size, smin, sfrac, both)| AugmentConfig {
            p,
            alpha,
            out_size,
            scale_range: [smin, smin + (1.0 - smin) * sfrac],
            center_crop_both: both,
            ..AugmentConfig::default()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn center_crop_keeps_the_center((h, w) in (1usize..64, 1usize..64), p in 0.05f64..=1.0) {
        if let Ok(r) = center_crop_region(h, w, p) {
            prop_assert!(r.fits(h, w));
            prop_assert_eq!(r.height, (p * h as f64 + 1e-9).floor() as usize);
            // Centers agree up to the half pixel lost to integer placement.
            let dy = (r.top as f64 + r.height as f64 / 2.0) - h as f64 / 2.0;
            let dx = (r.left as f64 + r.width as f64 / 2.0) - w as f64 / 2.0;
            prop_assert!(dy.abs() <= 0.5 && dx.abs() <= 0.5);
        }
    }

    #[test]
    fn views_stay_inside_their_source(img in any_image(), cfg in any_config(), seed in any::<u64>()) {
        let mut rng = substream(seed, domain::AUGMENT, &[]);
        let (x1, x2, trace) = augment_pair_traced(&img, &cfg, &mut rng).unwrap();
        let (h, w) = (img.height(), img.width());
        let center = center_crop_region(h, w, cfg.p).unwrap();
        let inside = |r: &CropRegion, b: &CropRegion| {
            r.top >= b.top && r.left >= b.left
                && r.top + r.height <= b.top + b.height
                && r.left + r.width <= b.left + b.width
        };
        prop_assert!(inside(&trace.first, &center));
        prop_assert!(trace.second.fits(h, w));
        if cfg.center_crop_both {
            prop_assert!(inside(&trace.second, &center));
        }
        for x in [&x1, &x2] {
            prop_assert_eq!((x.height(), x.width()), (cfg.out_size, cfg.out_size));
        }
        let again = augment_pair_traced(&img, &cfg, &mut substream(seed, domain::AUGMENT, &[])).unwrap();
        prop_assert_eq!((x1, x2, trace), again);
    }
}
