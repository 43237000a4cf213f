use serde::{Deserialize, Serialize};

use crate::conformal::MarginCase;
use crate::controller::{ControlMode, Scenario};
use crate::plant::Vec3;

/// What the loop recorded at one controller step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: u64,
    pub k_local: usize,
    pub t: f64,
    pub thread: usize,
    pub score: Option<f64>,
    pub q_active: f64,
    pub d_bar: f64,
    pub case: MarginCase,
    /// Whether the score exceeded the threshold it was checked against.
    pub miss_at_update: Option<bool>,
    pub mode: ControlMode,
    pub feasible: bool,
    pub tracking_error: f64,
    /// Position tube the previous step predicted for this one, m.
    pub predicted_tube: f64,
    /// Position tube this step predicts for the next one, m.
    pub tube_next: f64,
}

/// Raw per-episode data the metrics are computed from.
#[derive(Debug, Clone, Default)]
pub struct EpisodeTrace {
    pub episode: usize,
    pub plant_seed: u64,
    pub wind_time_offset: f64,
    pub steps: Vec<StepRecord>,
    /// Position at every fine grid point, including `t = 0`.
    pub positions: Vec<Vec3>,
    /// Norm of the true lumped residual at each fine-step midpoint.
    pub d_norm: Vec<f64>,
    /// The true lumped residual at the same midpoints.
    pub d_true: Vec<Vec3>,
    pub max_theta_norm: f64,
    pub empirical_lipschitz_f: f64,
    pub abort: Option<String>,
}

/// Labels that can only be assigned once later data has arrived.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Retrospective {
    /// `S_{k+P} <= q_active(k)`.
    pub covered_score: Vec<Option<bool>>,
    /// `sup_{[t_k, t_k + T_p]} |d| <= d_bar(k)`.
    pub covered_pointwise: Vec<Option<bool>>,
    /// The true path satisfies every constraint over `[t_k, t_k + T_p]`.
    pub safe: Vec<Option<bool>>,
    /// Steps whose update-time miss flag disagrees with the label assigned
    /// `P` steps earlier.
    pub bookkeeping_mismatches: usize,
}

pub fn position_violates(scenario: &Scenario, r: &Vec3) -> bool {
    scenario.obstacle_clearance(r) < 0.0 || r[2] < scenario.altitude[0] || r[2] > scenario.altitude[1]
}

impl Retrospective {
    pub fn compute(trace: &EpisodeTrace, horizon: usize, inner: usize, scenario: &Scenario) -> Self {
        let n = trace.steps.len();
        let mut out = Retrospective::default();
        for (i, step) in trace.steps.iter().enumerate() {
            let later = trace.steps.get(i + horizon);
            let covered = match (step.score, later.and_then(|s| s.score)) {
                (Some(_), Some(label)) => Some(label <= step.q_active),
                _ => None,
            };
            if let (Some(c), Some(miss)) = (covered, later.and_then(|s| s.miss_at_update)) {
                if c == miss {
                    out.bookkeeping_mismatches += 1;
                }
            }
            out.covered_score.push(covered);

            let (lo, hi) = (i * inner, (i + horizon) * inner);
            out.covered_pointwise.push((hi <= trace.d_norm.len()).then(|| {
                trace.d_norm[lo..hi].iter().all(|d| *d <= step.d_bar)
            }));
            out.safe.push((hi < trace.positions.len()).then(|| {
                trace.positions[lo..=hi].iter().all(|r| !position_violates(scenario, r))
            }));
        }
        debug_assert_eq!(out.covered_score.len(), n);
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub plant_seed: u64,
    pub wind_time_offset: f64,
    pub steps: usize,
    pub conformal_updates: usize,
    pub coverage_pointwise: Option<f64>,
    pub coverage_pointwise_samples: usize,
    pub coverage_score: Option<f64>,
    pub coverage_score_samples: usize,
    pub mean_d_bar: Option<f64>,
    pub max_d_bar: Option<f64>,
    pub mean_tube: f64,
    /// Fine-grid samples of the true path outside the constraint set.
    pub constraint_violations: usize,
    pub min_obstacle_clearance: f64,
    pub goal_reached: bool,
    pub time_to_goal: Option<f64>,
    pub corridor_passage: bool,
    pub infeasible_plans: usize,
    pub fallback_steps: usize,
    pub safe_fraction: Option<f64>,
    pub tube_excursions: usize,
    pub tube_excursions_unexplained: usize,
    pub bookkeeping_mismatches: usize,
    pub max_theta_norm: f64,
    pub lipschitz_empirical_max: f64,
    pub lipschitz_empirical_p99: f64,
    pub empirical_lipschitz_f: f64,
    pub final_position: Vec3,
    pub abort: Option<String>,
}

fn ratio(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| hits as f64 / total as f64)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Samples per averaging block of the smoothed disturbance rate.
pub const RATE_WINDOW: usize = 10;

/// Noise-smoothed rate of change: the difference of adjacent sliding block
/// means of `window` samples, divided by the block duration.
pub fn smoothed_rates(samples: &[Vec3], h: f64, window: usize) -> Vec<f64> {
    let window = window.max(1);
    if samples.len() < 2 * window {
        return Vec::new();
    }
    let mut prefix = vec![[0.0; 3]; samples.len() + 1];
    for (i, s) in samples.iter().enumerate() {
        prefix[i + 1] = std::array::from_fn(|c| prefix[i][c] + s[c]);
    }
    let block = |i: usize| -> Vec3 { std::array::from_fn(|c| (prefix[i + window][c] - prefix[i][c]) / window as f64) };
    (0..=samples.len() - 2 * window)
        .map(|i| {
            let (a, b) = (block(i), block(i + window));
            let d: f64 = (0..3).map(|c| (b[c] - a[c]).powi(2)).sum();
            d.sqrt() / (window as f64 * h)
        })
        .collect()
}

/// Nearest-rank percentile of unsorted values; `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

impl EpisodeMetrics {
    pub fn compute(
        trace: &EpisodeTrace,
        retro: &Retrospective,
        scenario: &Scenario,
        grid_dt: f64,
    ) -> Self {
        let steps = &trace.steps;
        let active: Vec<usize> = (0..steps.len()).filter(|&i| steps[i].score.is_some()).collect();

        let pointwise: Vec<bool> = active.iter().filter_map(|&i| retro.covered_pointwise[i]).collect();
        let score: Vec<bool> = retro.covered_score.iter().filter_map(|c| *c).collect();
        let safe: Vec<bool> = retro.safe.iter().filter_map(|c| *c).collect();

        let mut excursions = 0;
        let mut unexplained = 0;
        for i in 1..steps.len() {
            if steps[i].tracking_error > steps[i].predicted_tube {
                excursions += 1;
                if retro.covered_score[i - 1] != Some(false) {
                    unexplained += 1;
                }
            }
        }

        let goal_index = trace.positions.iter().position(|r| scenario.in_goal(r));
        let rates = smoothed_rates(&trace.d_true, grid_dt, RATE_WINDOW);

        EpisodeMetrics {
            episode: trace.episode,
            plant_seed: trace.plant_seed,
            wind_time_offset: trace.wind_time_offset,
            steps: steps.len(),
            conformal_updates: active.len(),
            coverage_pointwise: ratio(pointwise.iter().filter(|c| **c).count(), pointwise.len()),
            coverage_pointwise_samples: pointwise.len(),
            coverage_score: ratio(score.iter().filter(|c| **c).count(), score.len()),
            coverage_score_samples: score.len(),
            mean_d_bar: mean(active.iter().map(|&i| steps[i].d_bar)),
            max_d_bar: active.iter().map(|&i| steps[i].d_bar).reduce(f64::max),
            mean_tube: mean(steps.iter().map(|s| s.tube_next)).unwrap_or(0.0),
            constraint_violations: trace
                .positions
                .iter()
                .filter(|r| position_violates(scenario, r))
                .count(),
            min_obstacle_clearance: trace
                .positions
                .iter()
                .map(|r| scenario.obstacle_clearance(r))
                .fold(f64::INFINITY, f64::min),
            goal_reached: goal_index.is_some(),
            time_to_goal: goal_index.map(|i| i as f64 * grid_dt),
            corridor_passage: scenario.passes_corridor(&trace.positions),
            infeasible_plans: steps.iter().filter(|s| !s.feasible).count(),
            fallback_steps: steps.iter().filter(|s| s.mode != ControlMode::Planned).count(),
            safe_fraction: ratio(safe.iter().filter(|c| **c).count(), safe.len()),
            tube_excursions: excursions,
            tube_excursions_unexplained: unexplained,
            bookkeeping_mismatches: retro.bookkeeping_mismatches,
            max_theta_norm: trace.max_theta_norm,
            lipschitz_empirical_max: rates.iter().copied().fold(0.0, f64::max),
            lipschitz_empirical_p99: percentile(&rates, 99.0),
            empirical_lipschitz_f: trace.empirical_lipschitz_f,
            final_position: trace.positions.last().copied().unwrap_or_default(),
            abort: trace.abort.clone(),
        }
    }
}

/// Pooled summary of a run; written to `metrics.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub adapt: bool,
    pub seed: u64,
    pub episodes: usize,
    pub steps: usize,
    pub conformal_updates: usize,
    pub coverage_pointwise: Option<f64>,
    pub coverage_pointwise_samples: usize,
    pub coverage_score: Option<f64>,
    pub coverage_score_samples: usize,
    /// Covered fraction of every update in the bank's lifetime, including
    /// labels that straddle episodes.
    pub bank_coverage: Option<f64>,
    pub mean_d_bar: Option<f64>,
    pub max_d_bar: Option<f64>,
    pub mean_tube: f64,
    pub constraint_violations: usize,
    pub episodes_with_violation: usize,
    pub min_obstacle_clearance: f64,
    pub goal_reached: bool,
    pub episodes_reaching_goal: usize,
    pub corridor_passages: usize,
    pub infeasible_plans: usize,
    pub infeasible_fraction: f64,
    pub fallback_steps: usize,
    pub safe_fraction: Option<f64>,
    pub tube_excursions: usize,
    pub tube_excursions_unexplained: usize,
    /// Fraction of steps with no tube excursion lacking a matching miss.
    pub tube_soundness: f64,
    pub bookkeeping_mismatches: usize,
    pub max_theta_norm: f64,
    pub lipschitz_configured: f64,
    pub lipschitz_empirical_max: f64,
    pub lipschitz_empirical_p99: f64,
    pub lipschitz_exceeded: bool,
    pub empirical_lipschitz_f: f64,
    pub per_episode: Vec<EpisodeMetrics>,
}

impl RunMetrics {
    pub fn pool(
        episodes: Vec<EpisodeMetrics>,
        adapt: bool,
        seed: u64,
        lipschitz: f64,
        bank_coverage: Option<f64>,
        all_rates: &[f64],
    ) -> Self {
        let sum = |f: fn(&EpisodeMetrics) -> usize| episodes.iter().map(f).sum::<usize>();
        let weighted = |value: fn(&EpisodeMetrics) -> Option<f64>, weight: fn(&EpisodeMetrics) -> usize| {
            let total: usize = episodes.iter().map(weight).sum();
            (total > 0).then(|| {
                episodes
                    .iter()
                    .map(|e| value(e).unwrap_or(0.0) * weight(e) as f64)
                    .sum::<f64>()
                    / total as f64
            })
        };
        let steps = sum(|e| e.steps);
        let infeasible = sum(|e| e.infeasible_plans);
        let unexplained = sum(|e| e.tube_excursions_unexplained);
        let evaluable = steps.saturating_sub(episodes.len());
        let lipschitz_max = all_rates.iter().copied().fold(0.0, f64::max);
        RunMetrics {
            adapt,
            seed,
            episodes: episodes.len(),
            steps,
            conformal_updates: sum(|e| e.conformal_updates),
            coverage_pointwise: weighted(|e| e.coverage_pointwise, |e| e.coverage_pointwise_samples),
            coverage_pointwise_samples: sum(|e| e.coverage_pointwise_samples),
            coverage_score: weighted(|e| e.coverage_score, |e| e.coverage_score_samples),
            coverage_score_samples: sum(|e| e.coverage_score_samples),
            bank_coverage,
            mean_d_bar: weighted(|e| e.mean_d_bar, |e| e.conformal_updates),
            max_d_bar: episodes.iter().filter_map(|e| e.max_d_bar).reduce(f64::max),
            mean_tube: weighted(|e| Some(e.mean_tube), |e| e.steps).unwrap_or(0.0),
            constraint_violations: sum(|e| e.constraint_violations),
            episodes_with_violation: episodes.iter().filter(|e| e.constraint_violations > 0).count(),
            min_obstacle_clearance: episodes
                .iter()
                .map(|e| e.min_obstacle_clearance)
                .fold(f64::INFINITY, f64::min),
            goal_reached: !episodes.is_empty() && episodes.iter().all(|e| e.goal_reached),
            episodes_reaching_goal: episodes.iter().filter(|e| e.goal_reached).count(),
            corridor_passages: episodes.iter().filter(|e| e.corridor_passage).count(),
            infeasible_plans: infeasible,
            infeasible_fraction: ratio(infeasible, steps).unwrap_or(0.0),
            fallback_steps: sum(|e| e.fallback_steps),
            safe_fraction: weighted(|e| e.safe_fraction, |e| e.steps),
            tube_excursions: sum(|e| e.tube_excursions),
            tube_excursions_unexplained: unexplained,
            tube_soundness: 1.0 - ratio(unexplained, evaluable).unwrap_or(0.0),
            bookkeeping_mismatches: sum(|e| e.bookkeeping_mismatches),
            max_theta_norm: episodes.iter().map(|e| e.max_theta_norm).fold(0.0, f64::max),
            lipschitz_configured: lipschitz,
            lipschitz_empirical_max: lipschitz_max,
            lipschitz_empirical_p99: percentile(all_rates, 99.0),
            lipschitz_exceeded: lipschitz_max > lipschitz,
            empirical_lipschitz_f: episodes.iter().map(|e| e.empirical_lipschitz_f).fold(0.0, f64::max),
            per_episode: episodes,
        }
    }
}
