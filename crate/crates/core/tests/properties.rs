use proptest::prelude::*;
use stealth_lab::cloud::FeatureCloud;
use stealth_lab::detector::{is_activated, DetectorParams};
use stealth_lab::dimension::{intrinsic_dimension, PairMode};
use stealth_lab::linalg::{dot, norm, scale, sub};
use stealth_lab::rng::{seeded, unit_ball, unit_sphere};
use stealth_lab::theory::{delta_edit, delta_hat, worst_case_fpr, CapGeometry};

fn unit(v: Vec<f64>) -> Option<Vec<f64>> {
    let n = norm(&v);
    (n > 1e-3).then(|| scale(&v, 1.0 / n))
}

fn sphere_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_filter_map("non-zero", unit)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn delta_hat_lower_bounds_delta_edit(
        tau in sphere_vec(6),
        dir in sphere_vec(6),
        theta in 0.001f64..0.5,
        frac in 0.0f64..0.999,
    ) {
        let c = scale(&dir, frac * (1.0 - theta));
        let de = delta_edit(theta, &tau, &c).unwrap();
        let dh = delta_hat(theta, norm(&c)).unwrap();
        prop_assert!(dh <= de + 1e-9, "δ̂ {dh} > δ {de}");
    }

    #[test]
    fn activation_equals_cap_membership(
        tau in sphere_vec(5),
        dir in sphere_vec(5),
        z in sphere_vec(5),
        theta in 0.001f64..0.9,
        frac in 0.0f64..0.95,
    ) {
        let c = scale(&dir, frac * (1.0 - theta));
        let p = DetectorParams::new(tau.clone(), theta, 50.0, Some(c.clone())).unwrap();
        let cap = CapGeometry::new(&tau, theta, &c).unwrap();
        let f = p.response_on_feature(&z);
        // Skip points within rounding of the boundary.
        prop_assume!(f.abs() > 1e-6);
        prop_assert_eq!(is_activated(f), cap.contains(&z));
    }

    #[test]
    fn cap_pairs_respect_delta(tau in sphere_vec(4), theta in 0.01f64..0.6, seed in 0u64..1000) {
        let c = vec![0.0; 4];
        let delta = delta_edit(theta, &tau, &c).unwrap();
        let cloud = stealth_lab::theory::sample_cap(&tau, theta, &c, 50, seed).unwrap();
        for x in cloud.rows() {
            for y in cloud.rows() {
                prop_assert!(dot(&sub(x, y), y) >= delta - 1e-9);
            }
        }
    }

    #[test]
    fn worst_case_fpr_is_monotone(a in -1.0f64..60.0, b in -1.0f64..60.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(worst_case_fpr(hi) <= worst_case_fpr(lo));
        prop_assert!((0.0..=1.0).contains(&worst_case_fpr(lo)));
    }

    #[test]
    fn gain_does_not_change_activation(tau in sphere_vec(4), z in sphere_vec(4), gain in 0.1f64..1000.0) {
        let a = DetectorParams::new(tau.clone(), 0.05, 50.0, None).unwrap();
        let b = DetectorParams::new(tau, 0.05, gain, None).unwrap();
        let (fa, fb) = (a.response_on_feature(&z), b.response_on_feature(&z));
        prop_assume!(fa.abs() > 1e-6);
        prop_assert_eq!(is_activated(fa), is_activated(fb));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dimension_is_monotone_in_delta(seed in 0u64..100, d in 2usize..10) {
        let mut rng = seeded(seed);
        let rows: Vec<Vec<f64>> = (0..150).map(|_| unit_sphere(&mut rng, d)).collect();
        let cloud = FeatureCloud::from_rows(rows, true, "s").unwrap();
        let mut last = f64::NEG_INFINITY;
        for delta in [-2.0, -1.0, -0.5, -0.2, 0.0] {
            let n = intrinsic_dimension(&cloud, delta, PairMode::Exact).unwrap().n_hat;
            prop_assert!(n >= last);
            last = n;
        }
    }

    #[test]
    fn lower_bound_never_exceeds_estimate(seed in 0u64..100, d in 2usize..12) {
        let mut rng = seeded(seed);
        let rows: Vec<Vec<f64>> = (0..100).map(|_| unit_ball(&mut rng, d)).collect();
        let cloud = FeatureCloud::from_rows(rows, false, "b").unwrap();
        let e = intrinsic_dimension(&cloud, -0.1, PairMode::Exact).unwrap();
        prop_assert!(e.n_lower_bound <= e.n_hat);
        prop_assert!(e.n_hat >= -1.0);
    }
}
