//! Property tests for the algebraic invariants the pipeline leans on.

use proptest::prelude::*;

use soda_core::behavior::{apply_mask, SafetyMask};
use soda_core::data_model::{
    action_components, compute_reward, discretize_action, ActionGrid, RewardConfig, NUM_ACTIONS,
};
use soda_core::ope::{ess, importance_weights};
use soda_core::policy::{masked_softmax, softmax};
use soda_core::training::symkl_clamped;

fn normalized(raw: Vec<f64>) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

fn mask_from_bits(bits: u32) -> SafetyMask {
    let actions: Vec<usize> = (0..NUM_ACTIONS).filter(|a| bits >> a & 1 == 1).collect();
    SafetyMask::from_actions(&actions, 0.03)
}

proptest! {
    #[test]
    fn action_id_components_round_trip(v in 0usize..5, f in 0usize..4) {
        let grid = ActionGrid::default();
        let id = grid.action_id(v, f);
        prop_assert!(id < NUM_ACTIONS);
        prop_assert_eq!(action_components(id).unwrap(), (v, f));
    }

    #[test]
    fn discretized_doses_stay_in_their_bins(fluid in 0.0f64..5000.0, vaso in 0.0f64..400.0) {
        let grid = ActionGrid::default();
        let id = discretize_action(fluid, vaso, &grid).unwrap();
        let (v, f) = action_components(id).unwrap();
        // re-discretizing along each axis gives the same bin
        prop_assert_eq!(grid.fluid_bin(fluid).unwrap(), f);
        prop_assert_eq!(grid.vaso_bin(vaso).unwrap(), v);
        // bins are monotone in dose
        prop_assert!(grid.fluid_bin(fluid + 1.0).unwrap() >= f);
        prop_assert!(grid.vaso_bin(vaso + 1.0).unwrap() >= v);
    }

    #[test]
    fn reward_is_bounded_and_monotone(map in 0.0f64..120.0, delta in 0.0f64..40.0, urine in proptest::option::of(0.0f64..100.0)) {
        let cfg = RewardConfig::default();
        let r = compute_reward::<f64>(map, urine, &cfg);
        prop_assert!((0.0..=1.0).contains(&r));
        // more pressure never hurts, at fixed urine output
        let r2 = compute_reward::<f64>(map + delta, urine, &cfg);
        prop_assert!(r2 >= r);
        if let Some(u) = urine {
            if u >= cfg.urine_exemption_threshold && map >= cfg.urine_exempt_map_floor {
                prop_assert_eq!(r, 1.0);
            }
        }
    }

    #[test]
    fn apply_mask_renormalizes_and_is_idempotent(
        raw in proptest::collection::vec(0.001f64..1.0, NUM_ACTIONS),
        bits in 1u32..(1 << NUM_ACTIONS),
    ) {
        let probs = normalized(raw);
        let mask = mask_from_bits(bits);
        let masked = apply_mask(&probs, &mask);
        let sum: f64 = masked.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
        for (a, p) in masked.iter().enumerate() {
            if mask.contains(a) {
                prop_assert!(*p >= 0.0);
            } else {
                prop_assert_eq!(*p, 0.0);
            }
        }
        let twice = apply_mask(&masked, &mask);
        for (x, y) in masked.iter().zip(&twice) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        logits in proptest::collection::vec(-30.0f64..30.0, NUM_ACTIONS),
        shift in -50.0f64..50.0,
    ) {
        let p = softmax(&logits);
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|x| *x > 0.0));
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn masked_softmax_support_matches_mask(
        logits in proptest::collection::vec(-30.0f64..30.0, NUM_ACTIONS),
        bits in 1u32..(1 << NUM_ACTIONS),
    ) {
        let mask = mask_from_bits(bits);
        let p = masked_softmax(&logits, &mask);
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        for (a, x) in p.iter().enumerate() {
            if mask.contains(a) {
                prop_assert!(*x > 0.0);
            } else {
                prop_assert_eq!(*x, 0.0);
            }
        }
    }

    #[test]
    fn ess_lies_between_one_and_n(weights in proptest::collection::vec(0.01f64..100.0, 1..50)) {
        let e = ess(&weights);
        let n = weights.len() as f64;
        prop_assert!(e >= 1.0 - 1e-9 && e <= n + 1e-9, "ess {e} for n {n}");
    }

    #[test]
    fn importance_weights_are_running_ratio_products(
        steps in proptest::collection::vec((0.01f64..1.0, 0.01f64..1.0), 1..12),
    ) {
        let pol: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let beh: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let (rho, clamped) = importance_weights(&pol, &beh);
        prop_assert_eq!(clamped, 0);
        let mut expected = 1.0;
        for (t, (p, b)) in pol.iter().zip(&beh).enumerate() {
            expected *= p / b;
            prop_assert!((rho[t] - expected).abs() <= 1e-9 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn symkl_is_a_symmetric_premetric(
        raw_p in proptest::collection::vec(0.001f64..1.0, NUM_ACTIONS),
        raw_q in proptest::collection::vec(0.001f64..1.0, NUM_ACTIONS),
    ) {
        let mask = SafetyMask::all_allowed();
        let p = normalized(raw_p);
        let q = normalized(raw_q);
        let pq: f64 = symkl_clamped(&p, &q, &mask);
        let qp: f64 = symkl_clamped(&q, &p, &mask);
        prop_assert!(pq >= 0.0);
        prop_assert!((pq - qp).abs() < 1e-12);
        let self_dist: f64 = symkl_clamped(&p, &p, &mask);
        prop_assert!(self_dist.abs() < 1e-12);
    }
}
