use proptest::prelude::*;

use siocp::history::{HistoryStack, LipschitzOracle, OracleTrajectory};

const H: f64 = 0.01;
const WINDOW: f64 = 0.5;

/// `f_nom = u + theta`, integrated exactly by the trapezoid rule with held `u`.
fn drift(_x: &[f64], u: &[f64], theta: &[f64], out: &mut [f64]) {
    for i in 0..out.len() {
        out[i] = u[i] + theta[i];
    }
}

/// Builds `x' = u + theta + d` exactly for a piecewise-linear `d` and a
/// piecewise-constant `u`.
fn synthetic_stack(traj: &OracleTrajectory, inputs: &[Vec<f64>], theta: &[f64]) -> HistoryStack {
    let dim = traj.values[0].len();
    let mut stack = HistoryStack::new(traj.grid_dt, WINDOW).unwrap();
    let mut x = vec![0.3; dim];
    for (i, d) in traj.values.iter().enumerate() {
        if i > 0 {
            let prev = &traj.values[i - 1];
            for c in 0..dim {
                x[c] += traj.grid_dt * (inputs[i - 1][c] + theta[c]) + 0.5 * traj.grid_dt * (prev[c] + d[c]);
            }
        }
        stack.push(i as f64 * traj.grid_dt, &x, &inputs[i], theta).unwrap();
    }
    stack
}

fn inputs_for(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..dim).map(|c| ((i * 7 + c * 3) as f64 + seed as f64).sin()).collect())
        .collect()
}

#[test]
fn oracle_score_matches_stack_score() {
    let oracle = LipschitzOracle::new(15.0, WINDOW, H);
    for seed in 0..200 {
        let traj = oracle.generate(seed);
        let inputs = inputs_for(traj.values.len(), 3, seed);
        let stack = synthetic_stack(&traj, &inputs, &[0.1, -0.2, 0.05]);
        let s = stack.integral_score(&drift).unwrap().value;
        assert!((s - traj.score).abs() <= 1e-8 * traj.score.max(1e-12), "seed {seed}: {s} vs {}", traj.score);
    }
}

fn ramp(peak: f64, lipschitz: f64) -> OracleTrajectory {
    let n = (WINDOW / H).round() as usize;
    let values = (0..=n)
        .map(|i| {
            let t = i as f64 * H;
            vec![(peak - lipschitz * (WINDOW - t)).max(0.0), 0.0, 0.0]
        })
        .collect();
    OracleTrajectory::from_values(H, values)
}

#[test]
fn short_ramp_attains_the_sqrt_case_bound() {
    let (peak, l) = (2.0, 10.0);
    assert!(WINDOW >= peak / l);
    let traj = ramp(peak, l);
    assert!((traj.sup_norm - peak).abs() < 1e-12);
    assert!((traj.score - peak * peak / (2.0 * l)).abs() < 1e-12);
}

#[test]
fn long_ramp_attains_the_trapezoid_case_bound() {
    let (peak, l) = (8.0, 10.0);
    assert!(WINDOW < peak / l);
    let traj = ramp(peak, l);
    assert!((traj.score - (peak * WINDOW - 0.5 * l * WINDOW * WINDOW)).abs() < 1e-12);
}

#[test]
fn quadrature_converges_at_second_order() {
    // x' = -x + d with d = 1 + 0.5 sin(3t); the integrated residual grows
    // monotonically, so the full window attains the supremum.
    let exact_x = |t: f64| {
        let particular = |t: f64| 1.0 + 0.5 * ((3.0 * t).sin() - 3.0 * (3.0 * t).cos()) / 10.0;
        (1.0 - particular(0.0)) * (-t).exp() + particular(t)
    };
    let exact_score = WINDOW + 0.5 * (1.0 - (3.0 * WINDOW).cos()) / 3.0;
    let f_nom = |x: &[f64], _u: &[f64], _th: &[f64], out: &mut [f64]| out[0] = -x[0];
    let mut logs = Vec::new();
    for h in [0.02, 0.01, 0.005, 0.0025] {
        let mut stack = HistoryStack::new(h, WINDOW).unwrap();
        let n = (WINDOW / h).round() as usize;
        for i in 0..=n {
            let t = i as f64 * h;
            stack.push(t, &[exact_x(t)], &[0.0], &[]).unwrap();
        }
        let s = stack.integral_score(&f_nom).unwrap();
        assert_eq!(s.argmax_index, (0, n));
        logs.push((h.ln(), (s.value - exact_score).abs().ln()));
    }
    let m = logs.len() as f64;
    let (sx, sy) = logs.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (sx / m, sy / m);
    let slope = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / logs.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!(slope >= 1.8, "observed order {slope}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn score_is_symmetric_and_dominates_the_full_window(seed in any::<u64>(), l in 0.5f64..30.0) {
        let traj = LipschitzOracle::new(l, WINDOW, H).generate(seed);
        let flipped: Vec<Vec<f64>> = traj.values.iter().map(|v| v.iter().map(|c| -c).collect()).collect();
        let back = OracleTrajectory::from_values(H, flipped);
        prop_assert!(traj.score >= 0.0);
        prop_assert!((back.score - traj.score).abs() <= 1e-12 * traj.score.max(1.0));

        let full: f64 = (0..3)
            .map(|c| {
                let s: f64 = traj.values.windows(2).map(|w| 0.5 * H * (w[0][c] + w[1][c])).sum();
                s * s
            })
            .sum::<f64>()
            .sqrt();
        prop_assert!(traj.score >= full - 1e-12 * full.max(1.0));
    }

    #[test]
    fn score_respects_the_peak_lower_bounds(seed in any::<u64>(), l in 0.5f64..30.0) {
        let traj = LipschitzOracle::new(l, WINDOW, H).generate(seed);
        let peak = traj.sup_norm;
        let bound = if WINDOW >= peak / l {
            peak * peak / (2.0 * l)
        } else {
            peak * WINDOW - 0.5 * l * WINDOW * WINDOW
        };
        prop_assert!(traj.score >= bound - l * H * H, "score {} below bound {}", traj.score, bound);
    }

    #[test]
    fn oracle_steps_are_lipschitz(seed in any::<u64>(), l in 0.1f64..30.0) {
        let traj = LipschitzOracle::new(l, WINDOW, H).generate(seed);
        prop_assert_eq!(traj.values.len(), 51);
        for w in traj.values.windows(2) {
            let step: f64 = w[0].iter().zip(&w[1]).map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt();
            prop_assert!(step <= l * H * (1.0 + 1e-12));
        }
    }
}
