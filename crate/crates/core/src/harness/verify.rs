//! Property suites runnable from the command line. Every suite uses fixed
//! seeds and returns a machine-readable report; a failing check carries its
//! first counterexample.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::conformal::{coverage_bound, margin_from_threshold, ocp_update, MarginCase, OcpConfig, StepSchedule, ThreadBank};
use crate::controller::{plan, tube_propagate, ControllerConfig, Scenario};
use crate::error::{Error, Result};
use crate::history::{HistoryStack, LipschitzOracle};
use crate::model::{forward, jacobian, min_kink_distance, AdaptiveModel, Features, PARAM_COUNT};
use crate::plant::{rigid_body_derivative, step_with_noise, ControlInput, PlantState, WindDragConfig};

pub const SUITES: [&str; 6] = [
    "conformal-bounds",
    "margin-soundness",
    "score-oracle",
    "jacobian",
    "plant-convergence",
    "controller-monotonicity",
];

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: Value,
    pub counterexample: Option<Value>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub seconds: f64,
    pub checks: Vec<Check>,
}

/// Sizes of the randomized parts of each suite.
#[derive(Debug, Clone, Copy)]
pub struct SuiteScale {
    pub bound_streams: usize,
    pub bound_length: usize,
    pub oracle_trajectories: usize,
    pub score_windows: usize,
    pub jacobian_points: usize,
}

impl Default for SuiteScale {
    fn default() -> Self {
        SuiteScale {
            bound_streams: 100,
            bound_length: 10_000,
            oracle_trajectories: 100_000,
            score_windows: 1_000,
            jacobian_points: 100,
        }
    }
}

pub fn run_suite(name: &str, scale: &SuiteScale) -> Result<SuiteReport> {
    let start = Instant::now();
    let checks = match name {
        "conformal-bounds" => conformal_bounds(scale.bound_streams, scale.bound_length),
        "margin-soundness" => margin_soundness(scale.oracle_trajectories),
        "score-oracle" => score_oracle(scale.score_windows)?,
        "jacobian" => vec![jacobian_check(scale.jacobian_points)],
        "plant-convergence" => vec![plant_convergence()?],
        "controller-monotonicity" => controller_monotonicity(),
        other => {
            return Err(Error::config(format!(
                "unknown suite {other:?}; expected one of {}",
                SUITES.join(", ")
            )))
        }
    };
    Ok(SuiteReport {
        suite: name.to_string(),
        passed: checks.iter().all(|c| c.passed),
        seconds: start.elapsed().as_secs_f64(),
        checks,
    })
}

/// Score-stream families, all bounded by `bound`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Uniform,
    AlwaysMax,
    AlwaysZero,
    /// Scores just above the current threshold whenever possible.
    Chasing,
    /// Scores that straddle the threshold in bursts.
    Bursty,
}

impl StreamKind {
    pub const ALL: [StreamKind; 5] = [
        StreamKind::Uniform,
        StreamKind::AlwaysMax,
        StreamKind::AlwaysZero,
        StreamKind::Chasing,
        StreamKind::Bursty,
    ];

    pub fn next(&self, q: f64, bound: f64, step: usize, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            StreamKind::Uniform => rng.random_range(0.0..=bound),
            StreamKind::AlwaysMax => bound,
            StreamKind::AlwaysZero => 0.0,
            StreamKind::Chasing => {
                if q < bound {
                    (q.max(0.0) + 1e-3 * bound).min(bound)
                } else {
                    0.0
                }
            }
            StreamKind::Bursty => {
                let high = !(step / 37).is_multiple_of(3);
                if high {
                    rng.random_range(0.5 * bound..=bound)
                } else {
                    rng.random_range(0.0..=0.2 * bound)
                }
            }
        }
    }
}

/// Per-prefix coverage error against the constant-step bound, for one stream.
/// Returns the first violating prefix, if any, and the worst ratio of error
/// to bound.
pub fn stream_bound_check(kind: StreamKind, seed: u64, length: usize, alpha: f64, eta: f64, bound: f64) -> (Option<(usize, f64, f64)>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = 0.0;
    let mut covered = 0usize;
    let mut worst: f64 = 0.0;
    for k in 1..=length {
        let s = kind.next(q, bound, k, &mut rng);
        if s <= q {
            covered += 1;
        }
        q = ocp_update(q, s, eta, alpha).expect("finite stream");
        let err = (covered as f64 / k as f64 - (1.0 - alpha)).abs();
        let limit = coverage_bound(bound, eta, eta, k as u64);
        worst = worst.max(err / limit);
        if err > limit {
            return (Some((k, err, limit)), worst);
        }
    }
    (None, worst)
}

fn conformal_bounds(streams: usize, length: usize) -> Vec<Check> {
    let (alpha, bound) = (0.1, 1.0);
    let mut violations = 0;
    let mut counterexample = None;
    let mut worst: f64 = 0.0;
    for s in 0..streams {
        let kind = StreamKind::ALL[s % StreamKind::ALL.len()];
        let eta = [0.05, 0.2, 0.5][s % 3];
        let (fail, w) = stream_bound_check(kind, s as u64, length, alpha, eta, bound);
        worst = worst.max(w);
        if let Some((k, err, limit)) = fail {
            violations += 1;
            counterexample.get_or_insert(json!({"stream": s, "kind": kind, "eta": eta, "prefix": k, "error": err, "bound": limit}));
        }
    }
    let single = Check {
        name: "prefix coverage error within (B + eta) / (eta K)".into(),
        passed: violations == 0,
        detail: json!({"streams": streams, "length": length, "violations": violations, "worst_ratio": worst}),
        counterexample,
    };

    // The same bound per thread of a staggered bank fed one interleaved stream.
    let cfg = OcpConfig {
        alpha,
        schedule: StepSchedule::Constant { eta: 0.2 },
        ..OcpConfig::default()
    };
    let threads = cfg.horizon_steps().expect("default horizon");
    let mut bank = ThreadBank::new(threads, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut thread_violation = None;
    for k in 0..(length as u64) {
        let j = bank.active_thread(k);
        let kind = StreamKind::ALL[j % StreamKind::ALL.len()];
        let s = kind.next(bank.thresholds[j], bound, k as usize, &mut rng);
        bank.update(k, s, &cfg).expect("valid update");
        let m = bank.update_counts[j];
        let err = ((m - bank.miss_counts[j]) as f64 / m as f64 - (1.0 - alpha)).abs();
        let limit = coverage_bound(bound, 0.2, 0.2, m);
        if err > limit && thread_violation.is_none() {
            thread_violation = Some(json!({"step": k, "thread": j, "error": err, "bound": limit}));
        }
    }
    let staggered = Check {
        name: "per-thread coverage error of a staggered bank".into(),
        passed: thread_violation.is_none(),
        detail: json!({"threads": threads, "updates": length}),
        counterexample: thread_violation,
    };
    vec![single, staggered]
}

fn margin_soundness(trajectories: usize) -> Vec<Check> {
    let (lipschitz, horizon, grid_dt) = (2.0, 0.5, 0.01);
    let boundary = 0.5 * lipschitz * horizon * horizon;
    let mut oracle = LipschitzOracle::new(lipschitz, horizon, grid_dt);
    let mut sqrt_cases = 0usize;
    let mut trapezoid_cases = 0usize;
    let mut violations = 0usize;
    let mut counterexample = None;
    let mut tightest: f64 = 0.0;
    for seed in 0..trajectories {
        // Alternate small and large initial values so both branches are hit.
        oracle.initial_norm = if seed % 2 == 0 { 0.5 * lipschitz * horizon } else { 3.0 * lipschitz * horizon };
        let tr = oracle.generate(seed as u64);
        let m = margin_from_threshold(tr.score, lipschitz, horizon);
        match m.case {
            MarginCase::Sqrt => sqrt_cases += 1,
            _ => trapezoid_cases += 1,
        }
        tightest = tightest.max(tr.sup_norm / m.d_bar.max(f64::MIN_POSITIVE));
        if tr.sup_norm > m.d_bar {
            violations += 1;
            counterexample.get_or_insert(json!({"seed": seed, "score": tr.score, "sup_norm": tr.sup_norm, "margin": m.d_bar}));
        }
    }
    let min_cases = trajectories / 10;
    vec![
        Check {
            name: "sup |d| <= margin(score) on Lipschitz trajectories".into(),
            passed: violations == 0,
            detail: json!({"trajectories": trajectories, "violations": violations, "max_sup_over_margin": tightest}),
            counterexample,
        },
        Check {
            name: "both margin branches exercised".into(),
            passed: sqrt_cases >= min_cases && trapezoid_cases >= min_cases,
            detail: json!({"sqrt": sqrt_cases, "trapezoid": trapezoid_cases, "boundary": boundary, "required_each": min_cases}),
            counterexample: None,
        },
    ]
}

type NominalFn = dyn Fn(&[f64], &[f64], &[f64]) -> Vec<f64>;

/// Straightforward re-derivation of the score: trapezoid integral of the
/// nominal derivative with the left input held, then every ordered pair.
pub fn brute_force_score(
    times: &[f64],
    states: &[Vec<f64>],
    inputs: &[Vec<f64>],
    thetas: &[Vec<f64>],
    f: &NominalFn,
) -> f64 {
    let n = states[0].len();
    let mut r = vec![vec![0.0; n]];
    let mut acc = vec![0.0; n];
    for i in 1..states.len() {
        let a = f(&states[i - 1], &inputs[i - 1], &thetas[i - 1]);
        let b = f(&states[i], &inputs[i - 1], &thetas[i]);
        let h = times[i] - times[i - 1];
        let mut row = vec![0.0; n];
        for c in 0..n {
            acc[c] += 0.5 * h * (a[c] + b[c]);
            row[c] = states[i][c] - states[0][c] - acc[c];
        }
        r.push(row);
    }
    let mut best: f64 = 0.0;
    for a in &r {
        for b in &r {
            let d: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
            best = best.max(d.sqrt());
        }
    }
    best
}

fn nominal(x: &[f64], u: &[f64], theta: &[f64]) -> Vec<f64> {
    let s = PlantState(x.try_into().expect("state"));
    let input = ControlInput(u.try_into().expect("input"));
    rigid_body_derivative(&s, &input, &forward(theta, &s.features()), 1.0, 9.81).to_vec()
}

fn score_oracle(windows: usize) -> Result<Vec<Check>> {
    let (grid_dt, horizon) = (0.01, 0.5);
    let mut worst: f64 = 0.0;
    let mut counterexample = None;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for w in 0..windows {
        let model = AdaptiveModel::random(w as u64, 0.5);
        let mut stack = HistoryStack::new(grid_dt, horizon)?;
        let n = stack.capacity();
        let t0: f64 = rng.random_range(0.0..10.0);
        let t0 = (t0 / grid_dt).round() * grid_dt;
        let mut times = Vec::new();
        let mut states = Vec::new();
        let mut inputs = Vec::new();
        let mut thetas = Vec::new();
        let drift = w % 2 == 0;
        for i in 0..n {
            let t = t0 + i as f64 * grid_dt;
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u = vec![rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(0.0..19.62)];
            let mut theta = model.theta.clone();
            if drift {
                theta[PARAM_COUNT - 1] += 0.01 * i as f64;
            }
            stack.push(t, &x, &u, &theta)?;
            times.push(t);
            states.push(x);
            inputs.push(u);
            thetas.push(theta);
        }
        let f = |x: &[f64], u: &[f64], th: &[f64], out: &mut [f64]| out.copy_from_slice(&nominal(x, u, th));
        let fast = stack.integral_score(&f)?.value;
        let slow = brute_force_score(&times, &states, &inputs, &thetas, &nominal);
        let diff = (fast - slow).abs();
        worst = worst.max(diff);
        if diff > 1e-12 {
            counterexample.get_or_insert(json!({"window": w, "integral_score": fast, "brute_force": slow}));
        }
    }
    Ok(vec![Check {
        name: "integral score equals the brute-force pair scan".into(),
        passed: counterexample.is_none(),
        detail: json!({"windows": windows, "max_abs_difference": worst, "tolerance": 1e-12}),
        counterexample,
    }])
}

/// Worst entrywise relative error of the analytic Jacobian against central
/// differences, over random points away from activation kinks.
pub fn jacobian_fd_error(points: usize, seed: u64) -> (f64, Option<Value>) {
    let eps = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut at = None;
    let mut p = 0;
    let mut attempt = 0u64;
    while p < points {
        attempt += 1;
        let model = AdaptiveModel::random(seed.wrapping_mul(1000).wrapping_add(attempt), 1.0);
        let xi: Features = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        if min_kink_distance(&model.theta, &xi) < 1e-3 {
            continue;
        }
        p += 1;
        let j = jacobian(&model.theta, &xi);
        let mut theta = model.theta.clone();
        for i in 0..PARAM_COUNT {
            let orig = theta[i];
            theta[i] = orig + eps;
            let plus = forward(&theta, &xi);
            theta[i] = orig - eps;
            let minus = forward(&theta, &xi);
            theta[i] = orig;
            for o in 0..3 {
                let fd = (plus[o] - minus[o]) / (2.0 * eps);
                let exact = j.get(o, i);
                let rel = (fd - exact).abs() / exact.abs().max(fd.abs()).max(1e-6);
                if rel > worst {
                    worst = rel;
                    at = Some(json!({"point": p, "param": i, "output": o, "analytic": exact, "finite_difference": fd}));
                }
            }
        }
    }
    (worst, at)
}

fn jacobian_check(points: usize) -> Check {
    let (worst, at) = jacobian_fd_error(points, 5);
    Check {
        name: "Jacobian matches central differences".into(),
        passed: worst <= 1e-4,
        detail: json!({"points": points, "max_relative_error": worst, "tolerance": 1e-4}),
        counterexample: (worst > 1e-4).then_some(at).flatten(),
    }
}

/// Observed order of the plant integrator from successive step halvings on
/// the disturbed, noiseless model.
pub fn integrator_orders() -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let cfg = WindDragConfig {
        noise_enabled: false,
        ..WindDragConfig::default()
    };
    let u = ControlInput([0.8, -0.6, 11.5]);
    let mut x0 = PlantState::at_rest([0.5, -0.3, 1.0]);
    x0.0[3..].copy_from_slice(&[1.5, -0.5, 0.3, 0.1, -0.05]);
    let horizon = 0.8;
    let integrate = |steps: usize| -> Result<PlantState> {
        let h = horizon / steps as f64;
        let mut x = x0;
        for i in 0..steps {
            x = step_with_noise(&x, &u, i as f64 * h, h, &cfg, &[0.0; 3])?.state;
        }
        Ok(x)
    };
    let reference = integrate(8 * 64)?;
    let counts = [8usize, 16, 32, 64];
    let mut steps = Vec::new();
    let mut errors = Vec::new();
    for n in counts {
        let x = integrate(n)?;
        let e: f64 = x.0.iter().zip(&reference.0).map(|(a, b)| (a - b).powi(2)).sum();
        steps.push(horizon / n as f64);
        errors.push(e.sqrt());
    }
    let lx: Vec<f64> = steps.iter().map(|h| h.ln()).collect();
    let ly: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let slope = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>()
        / lx.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
    Ok((steps, errors, slope))
}

fn plant_convergence() -> Result<Check> {
    let (steps, errors, order) = integrator_orders()?;
    Ok(Check {
        name: "RK4 observed order on the noiseless plant".into(),
        passed: order >= 3.8,
        detail: json!({"steps": steps, "errors": errors, "order": order, "required": 3.8}),
        counterexample: None,
    })
}

/// Planned obstacle clearance and feasibility for a grid of margins, at
/// fixed seeds and states where the obstacle constraint binds.
pub fn clearance_by_margin(margins: &[f64]) -> Vec<(String, Vec<(f64, bool)>)> {
    let scenario = Scenario::default();
    let cfg = ControllerConfig::default();
    let model = AdaptiveModel::zeros().snapshot();
    let starts: [([f64; 3], [f64; 3]); 4] = [
        ([4.5, 0.2, 1.0], [2.0, 0.0, 0.0]),
        ([2.0, 0.2, 1.0], [2.0, 0.0, 0.0]),
        ([2.0, -0.2, 1.0], [2.0, 0.0, 0.0]),
        ([4.5, 0.0, 1.0], [2.0, 0.3, 0.0]),
    ];
    starts
        .iter()
        .enumerate()
        .map(|(i, (r, v))| {
            let mut x = PlantState::at_rest(*r);
            x.0[3..6].copy_from_slice(v);
            let values = margins
                .iter()
                .map(|d| {
                    let p = plan(&x, &model, *d, 0.0, &[], &scenario, &cfg, 11 + i as u64);
                    (p.min_clearance(&scenario), p.feasible)
                })
                .collect();
            (format!("state {i}"), values)
        })
        .collect()
}

fn controller_monotonicity() -> Vec<Check> {
    let margins = [0.0, 0.5, 1.0, 2.0, 4.0];
    let cfg = ControllerConfig::default();
    let mut tube_ok = true;
    for w in margins.windows(2) {
        let a = tube_propagate(0.0, w[0], cfg.lambda_c, cfg.dt, cfg.horizon_steps);
        let b = tube_propagate(0.0, w[1], cfg.lambda_c, cfg.dt, cfg.horizon_steps);
        tube_ok &= a.iter().zip(&b).all(|(x, y)| x <= y);
    }
    let cases = clearance_by_margin(&margins);
    let mut counterexample = None;
    let mut compared = 0;
    for (name, c) in &cases {
        for (i, w) in c.windows(2).enumerate() {
            let ((c0, f0), (c1, f1)) = (w[0], w[1]);
            if !(f0 && f1) {
                continue;
            }
            compared += 1;
            if c1 < c0 && counterexample.is_none() {
                counterexample = Some(json!({"case": name, "margins": [margins[i], margins[i + 1]], "clearance": [c0, c1]}));
            }
        }
    }
    vec![
        Check {
            name: "tube radii nondecreasing in the margin".into(),
            passed: tube_ok,
            detail: json!({"margins": margins}),
            counterexample: None,
        },
        Check {
            name: "planned clearance of feasible plans nondecreasing in the margin".into(),
            passed: counterexample.is_none() && compared > 0,
            detail: json!({
                "margins": margins,
                "feasible_pairs_compared": compared,
                "clearance": cases.iter().map(|(n, c)| json!({"case": n, "values": c})).collect::<Vec<_>>(),
            }),
            counterexample,
        },
    ]
}
