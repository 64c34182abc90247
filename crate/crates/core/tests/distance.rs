use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use unvp::classifier::{ClassifierConfig, ClassifierModel};
use unvp::distance::{
    environment_distance, estimate_class_gaussian, gaussian_w2_squared, sample_cost, DistanceConfig, GaussianEstimate,
};
use unvp::flow::{FlowConfig, FlowModel};
use unvp::gradcheck::randomize_params;
use unvp::{Error, Tensor};

fn gaussian(mean: Vec<f64>, variance: Vec<f64>) -> GaussianEstimate {
    GaussianEstimate::new(mean, variance).unwrap()
}

/// W2² between 1-D Gaussians estimated by pairing sorted samples (the optimal 1-D coupling).
fn sorted_coupling_w2(a: (f64, f64), b: (f64, f64), n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut draw = |(m, v): (f64, f64)| {
        let normal = Normal::new(m, v.sqrt()).unwrap();
        let mut xs: Vec<f64> = (0..n).map(|_| normal.sample(&mut *rng)).collect();
        xs.sort_by(f64::total_cmp);
        xs
    };
    let (xa, xb) = (draw(a), draw(b));
    xa.iter().zip(&xb).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / n as f64
}

#[test]
fn closed_form_examples() {
    let a = gaussian(vec![0.0, 0.0], vec![1.0, 1.0]);
    assert_eq!(gaussian_w2_squared(&a, &a).unwrap(), 0.0);
    assert_eq!(gaussian_w2_squared(&a, &gaussian(vec![3.0, 4.0], vec![1.0, 1.0])).unwrap(), 25.0);
    let s = gaussian(vec![0.0, 0.0], vec![1.0, 4.0]);
    let t = gaussian(vec![0.0, 0.0], vec![9.0, 16.0]);
    // (3 − 1)² + (4 − 2)² by hand.
    assert_eq!(gaussian_w2_squared(&s, &t).unwrap(), 8.0);
    assert!(matches!(gaussian_w2_squared(&a, &gaussian(vec![0.0], vec![1.0])), Err(Error::Domain(_))));
}

#[test]
fn closed_form_agrees_with_sorted_sample_coupling() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 10_000;
    let by_coords = sorted_coupling_w2((0.0, 1.0), (0.0, 9.0), n, &mut rng) + sorted_coupling_w2((0.0, 4.0), (0.0, 16.0), n, &mut rng);
    assert!((by_coords - 8.0).abs() / 8.0 < 0.05, "{by_coords}");
}

#[test]
fn estimator_examples() {
    let single = estimate_class_gaussian(&[vec![1.5, -2.0]]).unwrap();
    assert_eq!(single.mean, vec![1.5, -2.0]);
    assert_eq!(single.variance, vec![1e-6, 1e-6]);
    assert_eq!(single.count, 1);
    let pair = estimate_class_gaussian(&[vec![-1.0], vec![1.0]]).unwrap();
    assert_eq!((pair.mean[0], pair.variance[0]), (0.0, 1.0));
    assert!(matches!(estimate_class_gaussian(&[]), Err(Error::Domain(_))));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let normal = Normal::new(2.0, 3.0).unwrap();
    let draws: Vec<Vec<f64>> = (0..10_000).map(|_| vec![normal.sample(&mut rng)]).collect();
    let est = estimate_class_gaussian(&draws).unwrap();
    assert!((est.mean[0] - 2.0).abs() < 0.1, "{}", est.mean[0]);
    assert!((est.variance[0] - 9.0).abs() < 0.3, "{}", est.variance[0]);
}

#[test]
fn environment_sums_per_class_terms() {
    let base = vec![Some(gaussian(vec![0.0, 0.0], vec![1.0, 1.0])), Some(gaussian(vec![1.0, 1.0], vec![2.0, 2.0]))];
    assert_eq!(environment_distance(&base, &base).unwrap(), 0.0);
    let mut shifted = base.clone();
    shifted[1] = Some(gaussian(vec![4.0, 5.0], vec![2.0, 2.0]));
    assert_eq!(environment_distance(&base, &shifted).unwrap(), 25.0);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut random = || {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mean: Vec<f64> = (0..4).map(|_| normal.sample(&mut rng)).collect();
        let var: Vec<f64> = (0..4).map(|_| normal.sample(&mut rng).abs() + 0.1).collect();
        gaussian(mean, var)
    };
    let (a, b, c, d) = (random(), random(), random(), random());
    let total = environment_distance(&[Some(a.clone()), Some(b.clone())], &[Some(c.clone()), Some(d.clone())]).unwrap();
    let by_hand = gaussian_w2_squared(&a, &c).unwrap() + gaussian_w2_squared(&b, &d).unwrap();
    assert!((total - by_hand).abs() < 1e-12);

    let err = environment_distance(&base, &[base[0].clone(), None]).unwrap_err();
    assert!(err.to_string().contains("class 1"), "{err}");
}

#[test]
fn fifty_random_pairs_match_the_coupling_estimate() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let normal = Normal::new(0.0, 1.0).unwrap();
    for _ in 0..50 {
        let random = |rng: &mut ChaCha8Rng| {
            let mean: Vec<f64> = (0..3).map(|_| 2.0 * normal.sample(rng)).collect();
            let var: Vec<f64> = (0..3).map(|_| normal.sample(rng).powi(2) * 4.0 + 0.25).collect();
            gaussian(mean, var)
        };
        let (a, b) = (random(&mut rng), random(&mut rng));
        let exact = gaussian_w2_squared(&a, &b).unwrap();
        let estimate: f64 = (0..3)
            .map(|i| sorted_coupling_w2((a.mean[i], a.variance[i]), (b.mean[i], b.variance[i]), 10_000, &mut rng))
            .sum();
        assert!((estimate - exact).abs() / exact < 0.05, "exact {exact}, estimate {estimate}");
    }
}

fn small_classifier() -> ClassifierModel {
    let cfg = ClassifierConfig {
        conv1_channels: 2,
        conv2_channels: 2,
        kernel: 3,
        hidden: 6,
        ..ClassifierConfig::default()
    };
    ClassifierModel::new(&[1, 4, 4], 3, cfg, 1).unwrap()
}

#[test]
fn sample_cost_examples() {
    let flow = FlowModel::new(&[1, 4, 4], 3, FlowConfig::default(), 0).unwrap();
    let mut clf = small_classifier();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    randomize_params(clf.params_mut(), 0.5, &mut rng);
    let x_src = Tensor::from_fn(&[1, 4, 4], |i| (i as f64 * 0.37).sin().abs());
    let mut x = x_src.clone();
    for (i, d) in [(0, 1.0), (5, 2.0), (9, 2.0)] {
        x.data_mut()[i] += d;
    }
    let no_features = DistanceConfig {
        alpha: 1.0,
        feature_weight: 0.0,
    };
    assert_eq!(sample_cost(&x, &x_src, &flow, &clf, &no_features).unwrap(), 9.0);
    let with_features = DistanceConfig::default();
    assert_eq!(sample_cost(&x_src, &x_src, &flow, &clf, &with_features).unwrap(), 0.0);
    assert!(sample_cost(&x, &x_src, &flow, &clf, &with_features).unwrap() > 9.0);
    assert!(sample_cost(&x, &x_src.reshape(&[16]).unwrap(), &flow, &clf, &with_features).is_ok());
    assert!(sample_cost(&x, &Tensor::zeros(&[1, 3, 3]), &flow, &clf, &with_features).is_err());
}

fn arb_gaussian(dim: usize) -> impl Strategy<Value = GaussianEstimate> {
    (prop::collection::vec(-10.0f64..10.0, dim), prop::collection::vec(1e-6f64..25.0, dim))
        .prop_map(|(m, v)| GaussianEstimate::new(m, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn symmetric_non_negative_and_zero_only_on_identity(a in arb_gaussian(4), b in arb_gaussian(4)) {
        let ab = gaussian_w2_squared(&a, &b).unwrap();
        prop_assert_eq!(ab, gaussian_w2_squared(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(gaussian_w2_squared(&a, &a).unwrap(), 0.0);
        if a.mean != b.mean || a.variance != b.variance {
            prop_assert!(ab > 0.0);
        }
    }

    #[test]
    fn root_satisfies_the_triangle_inequality(a in arb_gaussian(3), b in arb_gaussian(3), c in arb_gaussian(3)) {
        let d = |x: &GaussianEstimate, y: &GaussianEstimate| gaussian_w2_squared(x, y).unwrap().sqrt();
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
    }

    #[test]
    fn common_mean_shift_changes_nothing(a in arb_gaussian(3), b in arb_gaussian(3), k in -8i32..8) {
        // Only shifts that leave every mean difference bit-identical can demand exact equality.
        let delta = k as f64 * 0.5;
        let shift = |g: &GaussianEstimate| GaussianEstimate::new(g.mean.iter().map(|m| m + delta).collect(), g.variance.clone()).unwrap();
        let (sa, sb) = (shift(&a), shift(&b));
        let diff_kept = a.mean.iter().zip(&b.mean).zip(sa.mean.iter().zip(&sb.mean)).all(|((x, y), (p, q))| x - y == p - q);
        prop_assume!(diff_kept);
        prop_assert_eq!(gaussian_w2_squared(&a, &b).unwrap(), gaussian_w2_squared(&sa, &sb).unwrap());
    }
}
