//! Rolling history of state, input and parameter trajectories, and the
//! supremum integral score computed from it.
//!
//! Trajectories are held on a uniform grid. The cumulative residual
//!
//! ```text
//! R(t_i) = x(t_i) - x(t_0) - \int_{t_0}^{t_i} f_nom(x, u, theta) ds
//! ```
//!
//! is built with trapezoidal quadrature, using on each grid interval the input
//! held at its left end. The score is the largest `|R(t_j) - R(t_i)|` over all
//! grid pairs `i <= j`, i.e. the largest integrated residual over any
//! sub-window.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const TIME_TOLERANCE: f64 = 1e-9;

/// The online-computable dynamics `f_nom(x, u, theta)`.
pub trait NominalDynamics {
    fn derivative(&self, x: &[f64], u: &[f64], theta: &[f64], out: &mut [f64]);
}

impl<F> NominalDynamics for F
where
    F: Fn(&[f64], &[f64], &[f64], &mut [f64]),
{
    fn derivative(&self, x: &[f64], u: &[f64], theta: &[f64], out: &mut [f64]) {
        self(x, u, theta, out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x: Vec<f64>,
    /// Input held from `t` until the next sample.
    pub u: Vec<f64>,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreResult {
    pub value: f64,
    /// Times `(tau_1, tau_2)` attaining the supremum.
    pub argmax: (f64, f64),
    /// Grid indices of `argmax`.
    pub argmax_index: (usize, usize),
    /// `R(t_i)` for every grid point of the window.
    pub residual_cumsum: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct HistoryStack {
    grid_dt: f64,
    window: f64,
    capacity: usize,
    samples: VecDeque<Sample>,
}

impl HistoryStack {
    pub fn new(grid_dt: f64, window: f64) -> Result<Self> {
        if !(grid_dt > 0.0 && window > 0.0) {
            return Err(Error::config("history grid step and window must be positive"));
        }
        let ratio = window / grid_dt;
        let intervals = ratio.round();
        if intervals < 1.0 || (ratio - intervals).abs() > 1e-9 * intervals {
            return Err(Error::config(format!(
                "history window {window} s is not a multiple of the grid step {grid_dt} s"
            )));
        }
        let capacity = intervals as usize + 1;
        Ok(HistoryStack {
            grid_dt,
            window,
            capacity,
            samples: VecDeque::with_capacity(capacity),
        })
    }

    pub fn grid_dt(&self) -> f64 {
        self.grid_dt
    }

    pub fn window(&self) -> f64 {
        self.window
    }

    /// Number of samples in a full window, `T_p / grid_dt + 1`.
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.samples.len() == self.capacity
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter()
    }

    pub fn last_time(&self) -> Option<f64> {
        self.samples.back().map(|s| s.t)
    }

    /// Appends a sample one grid step after the previous one, evicting the
    /// oldest sample once the window is full.
    pub fn push(&mut self, t: f64, x: &[f64], u: &[f64], theta: &[f64]) -> Result<()> {
        if !t.is_finite()
            || x.iter().chain(u).chain(theta).any(|v| !v.is_finite())
        {
            return Err(Error::DataIntegrity(format!(
                "non-finite history sample at t = {t}"
            )));
        }
        if let Some(last) = self.samples.back() {
            let expected = last.t + self.grid_dt;
            if (t - expected).abs() > TIME_TOLERANCE {
                return Err(Error::Sequencing(format!(
                    "history sample at t = {t} does not follow t = {} by {} s",
                    last.t, self.grid_dt
                )));
            }
            if x.len() != last.x.len() || u.len() != last.u.len() || theta.len() != last.theta.len()
            {
                return Err(Error::DataIntegrity(
                    "history sample dimensions changed".into(),
                ));
            }
        }
        let sample = if self.samples.len() == self.capacity {
            let mut recycled = self.samples.pop_front().expect("full buffer");
            recycled.t = t;
            recycled.x.copy_from_slice(x);
            recycled.u.copy_from_slice(u);
            recycled.theta.copy_from_slice(theta);
            recycled
        } else {
            Sample {
                t,
                x: x.to_vec(),
                u: u.to_vec(),
                theta: theta.to_vec(),
            }
        };
        self.samples.push_back(sample);
        Ok(())
    }

    /// Replaces the input held from the newest sample, for when the input is
    /// chosen after the sample was recorded.
    pub fn set_last_input(&mut self, u: &[f64]) -> Result<()> {
        let last = self
            .samples
            .back_mut()
            .ok_or(Error::InsufficientHistory { have: 0, need: 1 })?;
        if last.u.len() != u.len() || u.iter().any(|v| !v.is_finite()) {
            return Err(Error::DataIntegrity("input has the wrong size or is not finite".into()));
        }
        last.u.copy_from_slice(u);
        Ok(())
    }

    /// Cumulative residual curve `R(t_i)` over the stored window.
    pub fn residual_curve<F: NominalDynamics + ?Sized>(&self, f_nom: &F) -> Result<Vec<Vec<f64>>> {
        if !self.is_full() {
            return Err(Error::InsufficientHistory {
                have: self.samples.len(),
                need: self.capacity,
            });
        }
        let n = self.samples[0].x.len();
        let mut left = vec![0.0; n];
        let mut right = vec![0.0; n];
        let mut integral = vec![0.0; n];
        let mut curve = Vec::with_capacity(self.capacity);
        curve.push(vec![0.0; n]);
        let x0 = &self.samples[0].x;
        for pair in self.samples.iter().collect::<Vec<_>>().windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let h = b.t - a.t;
            f_nom.derivative(&a.x, &a.u, &a.theta, &mut left);
            f_nom.derivative(&b.x, &a.u, &b.theta, &mut right);
            let mut r = vec![0.0; n];
            for i in 0..n {
                integral[i] += 0.5 * h * (left[i] + right[i]);
                r[i] = b.x[i] - x0[i] - integral[i];
            }
            curve.push(r);
        }
        Ok(curve)
    }

    /// Supremum integral score over the stored window, by exhaustive scan of
    /// grid pairs.
    pub fn integral_score<F: NominalDynamics + ?Sized>(&self, f_nom: &F) -> Result<ScoreResult> {
        let curve = self.residual_curve(f_nom)?;
        let (value, i, j) = max_pair_distance(&curve);
        Ok(ScoreResult {
            value,
            argmax: (self.samples[i].t, self.samples[j].t),
            argmax_index: (i, j),
            residual_cumsum: curve,
        })
    }
}

/// Largest Euclidean distance `|c_j - c_i|` over `i <= j`, with its indices.
pub fn max_pair_distance(curve: &[Vec<f64>]) -> (f64, usize, usize) {
    let mut best = (0.0, 0, 0);
    let mut best_sq = 0.0;
    for i in 0..curve.len() {
        for j in (i + 1)..curve.len() {
            let sq: f64 = curve[j]
                .iter()
                .zip(&curve[i])
                .map(|(b, a)| (b - a) * (b - a))
                .sum();
            if sq > best_sq {
                best_sq = sq;
                best = (0.0, i, j);
            }
        }
    }
    best.0 = best_sq.sqrt();
    best
}

/// Random time-Lipschitz disturbance trajectories for testing the margin map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzOracle {
    pub lipschitz: f64,
    pub horizon: f64,
    pub grid_dt: f64,
    pub dim: usize,
    /// `|d(0)|` is drawn uniformly from `[0, initial_norm]`.
    pub initial_norm: f64,
}

/// A grid trajectory with its exact grid-level integral score and sup-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTrajectory {
    pub grid_dt: f64,
    pub values: Vec<Vec<f64>>,
    pub score: f64,
    pub sup_norm: f64,
}

impl LipschitzOracle {
    pub fn new(lipschitz: f64, horizon: f64, grid_dt: f64) -> Self {
        LipschitzOracle {
            lipschitz,
            horizon,
            grid_dt,
            dim: 3,
            initial_norm: lipschitz * horizon,
        }
    }

    /// Integrates a random derivative of norm at most `L_d`. The derivative
    /// direction follows a persistent random walk; its magnitude is drawn
    /// fresh each step.
    pub fn generate(&self, seed: u64) -> OracleTrajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steps = (self.horizon / self.grid_dt).round() as usize;
        let persistence: f64 = rng.random_range(0.0..0.99);
        let innovation = (1.0 - persistence * persistence).sqrt();

        let mut d = random_unit(&mut rng, self.dim);
        let r0: f64 = rng.random_range(0.0..=1.0) * self.initial_norm;
        d.iter_mut().for_each(|v| *v *= r0);
        let mut direction = random_unit(&mut rng, self.dim);

        let mut values = Vec::with_capacity(steps + 1);
        values.push(d.clone());
        for _ in 0..steps {
            let kick = random_unit(&mut rng, self.dim);
            for (w, k) in direction.iter_mut().zip(&kick) {
                *w = persistence * *w + innovation * k;
            }
            let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                direction.iter_mut().for_each(|v| *v /= norm);
            }
            let magnitude: f64 = rng.random_range(0.0..=1.0) * self.lipschitz;
            for (x, w) in d.iter_mut().zip(&direction) {
                *x += self.grid_dt * magnitude * w;
            }
            values.push(d.clone());
        }
        OracleTrajectory::from_values(self.grid_dt, values)
    }
}

impl OracleTrajectory {
    /// Scores a piecewise-linear trajectory. The trapezoid rule is exact for
    /// the linear interpolant, so the score is the exact supremum over grid pairs.
    pub fn from_values(grid_dt: f64, values: Vec<Vec<f64>>) -> Self {
        let dim = values.first().map_or(0, Vec::len);
        let mut cumulative = vec![vec![0.0; dim]];
        for w in values.windows(2) {
            let prev = cumulative.last().expect("seeded");
            let next: Vec<f64> = (0..dim)
                .map(|i| prev[i] + 0.5 * grid_dt * (w[0][i] + w[1][i]))
                .collect();
            cumulative.push(next);
        }
        let mut score_sq: f64 = 0.0;
        for (i, a) in cumulative.iter().enumerate() {
            for b in &cumulative[i..] {
                let sq: f64 = a.iter().zip(b).map(|(p, q)| (q - p).powi(2)).sum();
                score_sq = score_sq.max(sq);
            }
        }
        let sup_norm = values
            .iter()
            .map(|v| v.iter().map(|c| c * c).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        OracleTrajectory {
            grid_dt,
            values,
            score: score_sq.sqrt(),
            sup_norm,
        }
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|c| c / n).collect();
        }
    }
}
