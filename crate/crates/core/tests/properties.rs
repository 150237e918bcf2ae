//! Property tests for invariants that hold over whole input ranges.

use dynamo_core::env::{compute_reward, thresholds};
use dynamo_core::estimators::running_max_update;
use dynamo_core::mesh::{Bounds, Level};
use dynamo_core::metrics::{efficiency, normalize};
use dynamo_core::policies::{log_probs, threshold_absolute, threshold_relative};
use dynamo_core::trainer::normalize_advantages;
use proptest::prelude::*;

fn errors() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-12.0f64..0.0, 1..40).prop_map(|v| v.into_iter().map(|x| 10f64.powf(x)).collect())
}

proptest! {
    #[test]
    fn minimal_image_is_within_half_extent(
        ax in -3.0f64..3.0, ay in -3.0f64..3.0, bx in -3.0f64..3.0, by in -3.0f64..3.0,
        lx in 0.1f64..4.0, ly in 0.1f64..4.0,
    ) {
        let b = Bounds::new([0.0, 0.0], [lx, ly]);
        let d = b.periodic_delta([ax, ay], [bx, by]);
        prop_assert!(d[0].abs() <= 0.5 * lx + 1e-12);
        prop_assert!(d[1].abs() <= 0.5 * ly + 1e-12);
    }

    #[test]
    fn rewards_are_penalties(e in errors(), alpha in 0.01f64..1.0, beta in 1.01f64..3.0, fine in any::<bool>()) {
        let (e_max, e_min) = thresholds(&e, alpha, beta).unwrap();
        prop_assert!(e_min <= e_max);
        let a = vec![if fine { Level::Fine } else { Level::Coarse }; e.len()];
        for r in compute_reward(&a, &e, e_max, e_min, 10.0, 5.0) {
            prop_assert!(r <= 0.0 && r.is_finite());
        }
    }

    #[test]
    fn softmax_is_shift_invariant(a in -30.0f64..30.0, b in -30.0f64..30.0, c in -100.0f64..100.0) {
        let x = log_probs([a, b]);
        let y = log_probs([a + c, b + c]);
        prop_assert!((x[0] - y[0]).abs() < 1e-9 && (x[1] - y[1]).abs() < 1e-9);
        prop_assert!(((x[0].exp() + x[1].exp()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn absolute_threshold_is_monotone(e in errors(), t1 in -12.0f64..0.0, t2 in -12.0f64..0.0) {
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let fine_lo = threshold_absolute(&e, 10f64.powf(lo)).unwrap();
        let fine_hi = threshold_absolute(&e, 10f64.powf(hi)).unwrap();
        for (a, b) in fine_lo.iter().zip(&fine_hi) {
            // refined at the larger threshold implies refined at the smaller one
            prop_assert!(!(*b == Level::Fine && *a == Level::Coarse));
        }
    }

    #[test]
    fn relative_threshold_has_input_length(e in errors(), theta in 0.0f64..=1.0) {
        prop_assert_eq!(threshold_relative(&e, theta).unwrap().len(), e.len());
    }

    #[test]
    fn running_max_dominates_samples(samples in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 1..10)) {
        let mut acc = vec![0.0; 6];
        for s in &samples {
            running_max_update(&mut acc, s).unwrap();
        }
        for s in &samples {
            for (a, v) in acc.iter().zip(s) {
                prop_assert!(a >= v);
            }
        }
    }

    #[test]
    fn efficiency_never_exceeds_one(c in -2.0f64..2.0, e in -2.0f64..2.0) {
        prop_assert!(efficiency(c, e) <= 1.0);
    }

    #[test]
    fn normalization_maps_references_to_corners(
        cc in 1.0f64..100.0, dc in 0.1f64..100.0, ef in 1e-8f64..1e-2, de in 1e-8f64..1.0,
    ) {
        let coarse = (cc, ef + de);
        let fine = (cc + dc, ef);
        let (c0, e0) = normalize(coarse.0, coarse.1, coarse, fine).unwrap();
        let (c1, e1) = normalize(fine.0, fine.1, coarse, fine).unwrap();
        prop_assert_eq!((c0, e0), (0.0, 1.0));
        prop_assert_eq!((c1, e1), (1.0, 0.0));
    }

    #[test]
    fn normalized_advantages_are_standardized(a in prop::collection::vec(-50.0f64..50.0, 2..64)) {
        let n = normalize_advantages(&a);
        let mean = n.iter().sum::<f64>() / n.len() as f64;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!(n.iter().all(|x| x.is_finite()));
    }
}
