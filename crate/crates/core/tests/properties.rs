use proptest::prelude::*;
use uncmap::divergence::{alpha_divergence, bhattacharyya, entropy_of, DEFAULT_EPSILON};
use uncmap::uncertainty::{mask_values, spearman, MaskPolicy};

fn mass(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, k).prop_filter_map("all-zero weights", |w| {
        let s: f64 = w.iter().sum();
        (s > 0.0).then(|| w.iter().map(|x| x / s).collect())
    })
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..12).prop_flat_map(|k| (mass(k), mass(k)))
}

proptest! {
    #[test]
    fn bhattacharyya_is_symmetric_and_nonnegative((p, q) in pair()) {
        let d = bhattacharyya(&p, &q, DEFAULT_EPSILON).unwrap();
        prop_assert!(d >= -1e-12);
        prop_assert!((d - bhattacharyya(&q, &p, DEFAULT_EPSILON).unwrap()).abs() <= 1e-12);
        prop_assert!(d <= -DEFAULT_EPSILON.ln() + 1e-9);
    }

    #[test]
    fn alpha_divergence_is_nonnegative((p, q) in pair(), alpha in prop::sample::select(vec![0.25, 0.5, 2.0, 4.0])) {
        prop_assert!(alpha_divergence(&p, &q, alpha, DEFAULT_EPSILON).unwrap() >= -1e-12);
    }

    #[test]
    fn entropy_is_bounded_by_ln_classes(mu in (2usize..12).prop_flat_map(mass)) {
        let h = entropy_of(&mu, DEFAULT_EPSILON).unwrap();
        prop_assert!(h >= -1e-12);
        prop_assert!(h <= (mu.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn quantile_mask_keeps_floor_count(
        u in prop::collection::vec(prop::sample::select(vec![0.0, 0.5, 1.0, 2.0, 7.5]), 1..300),
        kf in 0.001f64..=1.0,
    ) {
        let m = mask_values(&u, &MaskPolicy::quantile(kf).unwrap()).unwrap();
        let kept = m.iter().filter(|&&x| x == 1.0).count();
        prop_assert_eq!(kept, (kf * u.len() as f64).floor() as usize);
        // Every kept voxel is at least as certain as every dropped one.
        let worst_kept = u.iter().zip(&m).filter(|(_, &k)| k == 1.0).map(|(x, _)| *x).fold(f64::NEG_INFINITY, f64::max);
        let best_dropped = u.iter().zip(&m).filter(|(_, &k)| k == 0.0).map(|(x, _)| *x).fold(f64::INFINITY, f64::min);
        prop_assert!(worst_kept <= best_dropped);
    }

    #[test]
    fn spearman_is_bounded_and_self_one(a in prop::collection::vec(-5.0f64..5.0, 3..80), b in prop::collection::vec(-5.0f64..5.0, 80)) {
        let b = &b[..a.len()];
        let r = spearman(&a, b);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        if a.iter().any(|&x| x != a[0]) {
            prop_assert!((spearman(&a, &a) - 1.0).abs() <= 1e-12);
        }
    }
}
