//! Property-based invariants for the environment and feature pipeline.

use proptest::prelude::*;

use pushrec::env::{self, EnvParams, PushEvent};
use pushrec::features::{HistoryBuffer, RunningNorm};
use pushrec::policy::softmax_temp;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Tangential wall force never exceeds the Coulomb bound.
    #[test]
    fn coulomb_bound(
        q1 in -1.2f64..1.2,
        q2 in -1.2f64..1.2,
        q3 in -1.2f64..1.2,
        dq1 in -8.0f64..8.0,
        dq2 in -8.0f64..8.0,
        dq3 in -8.0f64..8.0,
        wall_x in 0.1f64..1.5,
        mu in 0.0f64..2.0,
    ) {
        let mut p = EnvParams::default();
        p.wall_present = true;
        p.wall_x = wall_x;
        p.friction_mu = mu;
        let mut s = env::env_reset_seeded(&p, PushEvent::none(), 0);
        s.q = [q1, q2, q3];
        s.dq = [dq1, dq2, dq3];
        let wc = env::wall_contact(&s, &p);
        prop_assert!(wc.force[1].abs() <= mu * wc.force[0].abs() + 1e-12);
    }

    /// Sharded normalizer statistics merged in order match one sequential
    /// pass over the concatenated stream.
    #[test]
    fn normalizer_merge_matches_sequential(
        frames in prop::collection::vec(
            prop::collection::vec(-50.0f64..50.0, 3), 1..120),
        split in 0usize..120,
    ) {
        let split = split.min(frames.len());
        let mut seq = RunningNorm::new(3);
        for f in &frames {
            seq.update(f);
        }
        let mut a = RunningNorm::new(3);
        for f in &frames[..split] {
            a.update(f);
        }
        let mut b = RunningNorm::new(3);
        for f in &frames[split..] {
            b.update(f);
        }
        a.merge(&b);
        for i in 0..3 {
            prop_assert!((a.mean[i] - seq.mean[i]).abs() < 1e-9);
            prop_assert!((a.variance(i) - seq.variance(i)).abs() < 1e-7);
            prop_assert_eq!(a.count[i], seq.count[i]);
        }
    }

    /// Temperature softmax stays on the simplex and sharpens monotonically.
    #[test]
    fn softmax_simplex_and_sharpening(
        logits in prop::collection::vec(-10.0f64..10.0, 2..8),
        tau_hi in 0.2f64..2.0,
        frac in 0.05f64..0.95,
    ) {
        let tau_lo = tau_hi * frac;
        let p_hi = softmax_temp(&logits, tau_hi);
        let p_lo = softmax_temp(&logits, tau_lo);
        let sum: f64 = p_hi.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(p_hi.iter().all(|&x| x >= 0.0));
        let max_hi = p_hi.iter().cloned().fold(f64::MIN, f64::max);
        let max_lo = p_lo.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(max_lo >= max_hi - 1e-12);
    }

    /// History read-out is always H frames and strictly chronological.
    #[test]
    fn history_buffer_chronological(
        cap in 1usize..12,
        values in prop::collection::vec(0.0f64..1e6, 0..40),
    ) {
        let mut buf = HistoryBuffer::new(cap, 1);
        for (i, v) in values.iter().enumerate() {
            // encode arrival order in the frame so ordering is checkable
            buf.push(vec![i as f64 + v * 0.0]);
        }
        let m = buf.as_matrix();
        prop_assert_eq!(m.nrows(), cap);
        // zero-prefill rows first, then strictly increasing arrival indices
        let mut last = -1.0f64;
        let zeros = cap.saturating_sub(values.len());
        for r in 0..cap {
            let v = m[(r, 0)];
            if r < zeros {
                prop_assert_eq!(v, 0.0);
            } else {
                prop_assert!(v > last || (r == zeros && values.len() >= cap));
                last = v;
            }
        }
    }
}
