#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use siocp::conformal::{coverage_bound, margin_from_threshold, ocp_update, MarginCase, OcpConfig, StepSchedule, ThreadBank};

fn bank_cfg(threads: usize, eta: f64, alpha: f64) -> OcpConfig {
    OcpConfig {
        alpha,
        schedule: StepSchedule::Constant { eta },
        horizon: threads as f64 * 0.05,
        dt: 0.05,
        ..OcpConfig::default()
    }
}

#[test]
fn two_thread_bank_examples() {
    let cfg = bank_cfg(2, 0.1, 0.1);
    let mut bank = ThreadBank::new(2, 0.0);
    bank.thresholds = vec![1.0, 5.0];
    let q = bank.update(4, 2.0, &cfg).unwrap();
    assert!((q - 1.09).abs() < 1e-12);
    assert_eq!(bank.thresholds[1], 5.0);

    let mut bank = ThreadBank::new(2, 0.0);
    bank.thresholds = vec![1.0, 5.0];
    let q = bank.update(5, 2.0, &cfg).unwrap();
    assert!((q - 4.99).abs() < 1e-12);
    assert_eq!(bank.thresholds[0], 1.0);
}

/// Independent per-thread recursion for a constant score stream.
#[test]
fn constant_stream_per_thread_coverage() {
    let (threads, eta, alpha, score, steps) = (4usize, 0.5, 0.1, 1.0, 10_000u64);
    let cfg = bank_cfg(threads, eta, alpha);
    let mut bank = ThreadBank::new(threads, 0.0);
    let mut q = vec![0.0; threads];
    let mut covered = vec![0u64; threads];
    for k in 0..steps {
        let j = (k % threads as u64) as usize;
        if score <= q[j] {
            covered[j] += 1;
        }
        q[j] += eta * (if score > q[j] { 1.0 } else { 0.0 } - alpha);
        bank.update(k, score, &cfg).unwrap();
        assert_eq!(bank.thresholds[j], q[j]);
    }
    for j in 0..threads {
        let m = bank.update_counts[j];
        let cov = covered[j] as f64 / m as f64;
        assert!((cov - 0.9).abs() <= coverage_bound(score, eta, eta, m));
        assert_eq!(m - bank.miss_counts[j], covered[j]);
    }
}

/// A family of bounded score streams.
fn stream(family: usize, k: usize, rng: &mut ChaCha8Rng) -> f64 {
    match family {
        0 => rng.random_range(0.0..=1.0),
        1 => 0.5 + 0.4 * (k as f64 * 0.01).sin() + rng.random_range(-0.1..=0.1),
        _ => {
            let level: f64 = [0.2, 0.8, 0.5, 0.1][(k / 2500) % 4];
            (level + rng.random_range(-0.1..=0.1)).clamp(0.0, 1.0)
        }
    }
}

#[test]
fn per_thread_coverage_tracks_the_quantile() {
    let (threads, eta, alpha) = (10usize, 0.05, 0.1);
    let cfg = bank_cfg(threads, eta, alpha);
    for family in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(family as u64);
        let mut bank = ThreadBank::new(threads, 0.0);
        let steps = 20_000;
        for k in 0..steps {
            let s = stream(family, k, &mut rng);
            bank.update(k as u64, s, &cfg).unwrap();
            for q in &bank.thresholds {
                assert!(q.abs() <= 1.0 + eta, "threshold {q} escaped its bound");
            }
        }
        for j in 0..threads {
            let m = bank.update_counts[j];
            let cov = 1.0 - bank.miss_counts[j] as f64 / m as f64;
            let bound = coverage_bound(1.0, eta, eta, m);
            assert!((cov - (1.0 - alpha)).abs() <= bound, "family {family} thread {j}: {cov} vs bound {bound}");
        }
    }
}

#[test]
fn margin_case_boundary_is_continuous() {
    for (l, t) in [(1.0f64, 0.5f64), (15.0, 0.5), (2.0, 0.3), (0.7, 1.9)] {
        let q = 0.5 * l * t * t;
        let sqrt_branch = (2.0f64 * l * q).sqrt();
        let trapezoid = q / t + 0.5 * l * t;
        assert!((sqrt_branch - trapezoid).abs() <= 1e-12);
        let m = margin_from_threshold(q, l, t);
        assert_eq!(m.case, MarginCase::Trapezoid);
        assert!((m.d_bar - sqrt_branch).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn margin_is_monotone(q1 in -1.0f64..20.0, dq in 0.0f64..20.0, l in 0.01f64..50.0, t in 0.01f64..3.0) {
        let a = margin_from_threshold(q1, l, t);
        let b = margin_from_threshold(q1 + dq, l, t);
        prop_assert!(a.d_bar >= 0.0);
        prop_assert!(b.d_bar >= a.d_bar - 1e-12 * b.d_bar.max(1.0));
        let boundary = 0.5 * l * t * t;
        prop_assert_eq!(a.case == MarginCase::Sqrt, q1.max(0.0) < boundary);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn update_moves_by_the_indicator(q in -5.0f64..5.0, s in -5.0f64..5.0, eta in 0.001f64..2.0, alpha in 0.01f64..0.99) {
        let next = ocp_update(q, s, eta, alpha).unwrap();
        let expected = if s > q { q + eta * (1.0 - alpha) } else { q - eta * alpha };
        prop_assert_eq!(next, expected);
    }

    #[test]
    fn staggered_threads_are_isolated(
        scores in proptest::collection::vec(0.0f64..3.0, 40..200),
        eta1 in 0.05f64..1.0,
        decaying in any::<bool>(),
        threads in 1usize..8,
    ) {
        let schedule = if decaying { StepSchedule::Decaying { eta1 } } else { StepSchedule::Constant { eta: eta1 } };
        let cfg = OcpConfig { schedule, ..bank_cfg(threads, eta1, 0.1) };
        let mut bank = ThreadBank::new(threads, 0.0);
        let mut singles = vec![0.0; threads];
        for (k, s) in scores.iter().enumerate() {
            let before = bank.thresholds.clone();
            let j = k % threads;
            bank.update(k as u64, *s, &cfg).unwrap();
            singles[j] = ocp_update(singles[j], *s, schedule.eta(k as u64), 0.1).unwrap();
            for i in 0..threads {
                if i != j {
                    prop_assert_eq!(bank.thresholds[i].to_bits(), before[i].to_bits());
                }
            }
        }
        for j in 0..threads {
            prop_assert_eq!(bank.thresholds[j].to_bits(), singles[j].to_bits());
        }
    }

    #[test]
    fn bank_checkpoint_round_trips(scores in proptest::collection::vec(0.0f64..3.0, 1..60)) {
        let cfg = bank_cfg(10, 0.3, 0.1);
        let mut bank = ThreadBank::new(10, 0.0);
        for (k, s) in scores.iter().enumerate() {
            bank.update(k as u64, *s, &cfg).unwrap();
        }
        let back = ThreadBank::from_json(&bank.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, bank);
    }
}
