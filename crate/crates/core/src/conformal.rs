//! Staggered online conformal thresholds and the threshold-to-margin map.
//!
//! A bank of `P = T_p / dt` independent thresholds is kept. At step `k` only
//! thread `j = k mod P` moves: its threshold is nudged by a pinball-loss
//! sub-gradient step using the integral score of the window that just closed,
//! and the updated value calibrates the window that starts now. Because a
//! window's label arrives `P` steps after its prediction, each thread sees
//! exactly one label per prediction it issues.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack used when checking that `T_p` is an integer multiple of `dt`.
const GRID_TOLERANCE: f64 = 1e-9;

/// Pinball (quantile) loss `(1 - alpha) max(r, 0) + alpha max(-r, 0)`.
pub fn pinball_loss(r: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * r.max(0.0) + alpha * (-r).max(0.0)
}

/// One sub-gradient step of the pinball loss on a threshold.
///
/// A score equal to the threshold counts as covered.
pub fn ocp_update(q: f64, score: f64, eta: f64, alpha: f64) -> Result<f64> {
    if !score.is_finite() {
        return Err(Error::DataIntegrity(format!(
            "non-finite conformal score {score}"
        )));
    }
    let miss = if score > q { 1.0 } else { 0.0 };
    Ok(q + eta * (miss - alpha))
}

/// `(B + eta_1) / (eta_K K)`: worst-case gap between empirical coverage after
/// `K` updates and `1 - alpha`, valid for non-increasing step sizes and
/// scores bounded by `B`.
pub fn coverage_bound(score_bound: f64, eta_first: f64, eta_last: f64, count: u64) -> f64 {
    (score_bound + eta_first) / (eta_last * count as f64)
}

/// Step-size rule for the threshold recursion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant { eta: f64 },
    /// `eta_k = eta1 / sqrt(k)`, indexed by the global step counter.
    Decaying { eta1: f64 },
}

impl StepSchedule {
    pub fn eta(&self, k: u64) -> f64 {
        match *self {
            StepSchedule::Constant { eta } => eta,
            StepSchedule::Decaying { eta1 } => eta1 / (k.max(1) as f64).sqrt(),
        }
    }

    pub fn initial(&self) -> f64 {
        match *self {
            StepSchedule::Constant { eta } => eta,
            StepSchedule::Decaying { eta1 } => eta1,
        }
    }
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::Constant { eta: 0.2 }
    }
}

/// Parameters of the staggered estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpConfig {
    /// Target miscoverage rate.
    pub alpha: f64,
    pub schedule: StepSchedule,
    /// Initial threshold for every thread, in score units (state units x s).
    pub q_init: f64,
    /// Margin used until one full horizon of history exists.
    pub d_init: f64,
    /// Time-Lipschitz constant of the residual, state-derivative units per second.
    pub lipschitz: f64,
    /// Prediction horizon `T_p`, seconds.
    pub horizon: f64,
    /// Controller sampling period, seconds.
    pub dt: f64,
}

impl Default for OcpConfig {
    fn default() -> Self {
        OcpConfig {
            alpha: 0.1,
            schedule: StepSchedule::default(),
            q_init: 0.0,
            d_init: 5.0,
            lipschitz: 10.0,
            horizon: 0.5,
            dt: 0.05,
        }
    }
}

impl OcpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        let eta = self.schedule.initial();
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::config(format!("step size must be positive, got {eta}")));
        }
        if !(self.lipschitz > 0.0 && self.lipschitz.is_finite()) {
            return Err(Error::config(format!(
                "Lipschitz constant must be positive, got {}",
                self.lipschitz
            )));
        }
        if !(self.horizon > 0.0 && self.dt > 0.0) {
            return Err(Error::config("horizon and dt must be positive"));
        }
        if !(self.q_init >= 0.0 && self.d_init >= 0.0) {
            return Err(Error::config("q_init and d_init must be nonnegative"));
        }
        self.horizon_steps().map(|_| ())
    }

    /// Number of threads `P = T_p / dt`; rejects horizons that are not an
    /// integer multiple of the sampling period.
    pub fn horizon_steps(&self) -> Result<usize> {
        let ratio = self.horizon / self.dt;
        let rounded = ratio.round();
        if rounded < 1.0 || (ratio - rounded).abs() > GRID_TOLERANCE * rounded.max(1.0) {
            return Err(Error::config(format!(
                "horizon {} s is not a positive integer multiple of dt {} s",
                self.horizon, self.dt
            )));
        }
        Ok(rounded as usize)
    }

    /// Threshold where the margin switches from the square-root to the
    /// trapezoid branch.
    pub fn case_boundary(&self) -> f64 {
        0.5 * self.lipschitz * self.horizon * self.horizon
    }

    pub fn margin(&self, q_active: f64) -> Margin {
        margin_from_threshold(q_active, self.lipschitz, self.horizon)
    }
}

/// Which branch produced a margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginCase {
    /// Threshold below `L_d T_p^2 / 2`: the peak decays to zero inside the window.
    Sqrt,
    /// Threshold at or above the boundary: the window only sees a truncated trapezoid.
    Trapezoid,
    /// Fewer than `T_p` seconds of history; the configured initial margin applies.
    InitialPhase,
}

impl MarginCase {
    pub fn as_str(&self) -> &'static str {
        match self {
            MarginCase::Sqrt => "sqrt",
            MarginCase::Trapezoid => "trapezoid",
            MarginCase::InitialPhase => "initial",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Margin {
    pub case: MarginCase,
    pub d_bar: f64,
}

/// Converts a bound on the integrated residual into a pointwise bound on the
/// residual over the next horizon. Negative thresholds are clamped to zero.
pub fn margin_from_threshold(q_active: f64, lipschitz: f64, horizon: f64) -> Margin {
    let q = q_active.max(0.0);
    if q < 0.5 * lipschitz * horizon * horizon {
        Margin {
            case: MarginCase::Sqrt,
            d_bar: (2.0 * lipschitz * q).sqrt(),
        }
    } else {
        Margin {
            case: MarginCase::Trapezoid,
            d_bar: q / horizon + 0.5 * lipschitz * horizon,
        }
    }
}

/// Per-step output of the estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginRecord {
    pub k: u64,
    /// Active thread `k mod P`.
    pub thread: usize,
    /// Threshold the margin was computed from (raw, possibly negative).
    pub q_active: f64,
    pub case: MarginCase,
    pub d_bar: f64,
}

/// The `P` staggered thresholds plus bookkeeping; this is also the JSON
/// checkpoint format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreadBank {
    pub thresholds: Vec<f64>,
    /// Smallest step index the next update may use.
    pub step_index: u64,
    pub update_counts: Vec<u64>,
    pub miss_counts: Vec<u64>,
}

impl ThreadBank {
    pub fn new(threads: usize, q_init: f64) -> Self {
        ThreadBank {
            thresholds: vec![q_init; threads],
            step_index: 0,
            update_counts: vec![0; threads],
            miss_counts: vec![0; threads],
        }
    }

    pub fn threads(&self) -> usize {
        self.thresholds.len()
    }

    pub fn active_thread(&self, k: u64) -> usize {
        (k % self.threads() as u64) as usize
    }

    /// Updates thread `k mod P` with the score of the window ending at step
    /// `k` and returns its new threshold. Other threads are untouched.
    pub fn update(&mut self, k: u64, score: f64, cfg: &OcpConfig) -> Result<f64> {
        let threads = cfg.horizon_steps()?;
        if threads != self.threads() {
            return Err(Error::config(format!(
                "bank has {} threads but configuration implies {threads}",
                self.threads()
            )));
        }
        if k < self.step_index {
            return Err(Error::Sequencing(format!(
                "step {k} arrived after step {} was already processed",
                self.step_index - 1
            )));
        }
        let j = self.active_thread(k);
        let q = self.thresholds[j];
        let next = ocp_update(q, score, cfg.schedule.eta(k), cfg.alpha)?;
        self.thresholds[j] = next;
        self.update_counts[j] += 1;
        if score > q {
            self.miss_counts[j] += 1;
        }
        self.step_index = k + 1;
        Ok(next)
    }

    /// Fraction of updates so far whose score was covered by the threshold in force.
    pub fn empirical_coverage(&self) -> Option<f64> {
        let updates: u64 = self.update_counts.iter().sum();
        let misses: u64 = self.miss_counts.iter().sum();
        (updates > 0).then(|| 1.0 - misses as f64 / updates as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bank: ThreadBank = serde_json::from_str(text)?;
        let n = bank.thresholds.len();
        if n == 0 || bank.update_counts.len() != n || bank.miss_counts.len() != n {
            return Err(Error::DataIntegrity(
                "checkpoint counters do not match the number of thresholds".into(),
            ));
        }
        if bank.thresholds.iter().any(|q| !q.is_finite()) {
            return Err(Error::DataIntegrity("checkpoint holds a non-finite threshold".into()));
        }
        Ok(bank)
    }
}

/// Single-writer estimator: feed it one call per controller step.
#[derive(Debug, Clone)]
pub struct SiOcp {
    cfg: OcpConfig,
    bank: ThreadBank,
}

impl SiOcp {
    pub fn new(cfg: OcpConfig) -> Result<Self> {
        cfg.validate()?;
        let bank = ThreadBank::new(cfg.horizon_steps()?, cfg.q_init);
        Ok(SiOcp { cfg, bank })
    }

    /// Resumes from a checkpointed bank.
    pub fn with_bank(cfg: OcpConfig, bank: ThreadBank) -> Result<Self> {
        cfg.validate()?;
        if bank.threads() != cfg.horizon_steps()? {
            return Err(Error::config("checkpoint thread count does not match the horizon"));
        }
        Ok(SiOcp { cfg, bank })
    }

    pub fn config(&self) -> &OcpConfig {
        &self.cfg
    }

    pub fn bank(&self) -> &ThreadBank {
        &self.bank
    }

    pub fn into_bank(self) -> ThreadBank {
        self.bank
    }

    /// Whether step time `t_k` is past the initial phase.
    pub fn is_active(&self, t_k: f64) -> bool {
        t_k + GRID_TOLERANCE >= self.cfg.horizon
    }

    /// Runs one estimator step. `score` is the integral score over
    /// `[t_k - T_p, t_k]` and is required once `t_k >= T_p`; it is ignored
    /// before that.
    pub fn step(&mut self, k: u64, t_k: f64, score: Option<f64>) -> Result<MarginRecord> {
        let thread = self.bank.active_thread(k);
        if !self.is_active(t_k) {
            return Ok(MarginRecord {
                k,
                thread,
                q_active: self.bank.thresholds[thread],
                case: MarginCase::InitialPhase,
                d_bar: self.cfg.d_init,
            });
        }
        let score = score.ok_or(Error::InsufficientHistory { have: 0, need: 1 })?;
        let q_active = self.bank.update(k, score, &self.cfg)?;
        let margin = self.cfg.margin(q_active);
        Ok(MarginRecord {
            k,
            thread,
            q_active,
            case: margin.case,
            d_bar: margin.d_bar,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(eta: f64, alpha: f64, horizon: f64, dt: f64) -> OcpConfig {
        OcpConfig {
            alpha,
            schedule: StepSchedule::Constant { eta },
            horizon,
            dt,
            ..OcpConfig::default()
        }
    }

    #[test]
    fn pinball_examples() {
        assert_eq!(pinball_loss(0.0, 0.1), 0.0);
        assert!((pinball_loss(2.0, 0.1) - 1.8).abs() < 1e-15);
        assert!((pinball_loss(-2.0, 0.1) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn ocp_update_branches() {
        assert!((ocp_update(1.0, 2.0, 0.1, 0.1).unwrap() - 1.09).abs() < 1e-15);
        assert!((ocp_update(1.0, 0.5, 0.1, 0.1).unwrap() - 0.99).abs() < 1e-15);
        // tie is covered
        assert!((ocp_update(1.0, 1.0, 0.1, 0.1).unwrap() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn ocp_update_rejects_nan() {
        assert!(matches!(
            ocp_update(1.0, f64::NAN, 0.1, 0.1),
            Err(Error::DataIntegrity(_))
        ));
        assert!(ocp_update(1.0, f64::INFINITY, 0.1, 0.1).is_err());
    }

    #[test]
    fn bank_updates_only_the_active_thread() {
        let c = cfg(0.1, 0.1, 0.1, 0.05);
        let mut bank = ThreadBank::new(2, 0.0);
        bank.thresholds = vec![1.0, 5.0];
        let active = bank.update(4, 2.0, &c).unwrap();
        assert!((active - 1.09).abs() < 1e-15);
        assert_eq!(bank.thresholds[1], 5.0);

        let mut bank = ThreadBank::new(2, 0.0);
        bank.thresholds = vec![1.0, 5.0];
        let active = bank.update(5, 2.0, &c).unwrap();
        assert!((active - 4.99).abs() < 1e-15);
        assert_eq!(bank.thresholds[0], 1.0);
        assert_eq!(bank.update_counts, vec![0, 1]);
        assert_eq!(bank.miss_counts, vec![0, 0]);
    }

    #[test]
    fn bank_rejects_out_of_order_steps() {
        let c = cfg(0.1, 0.1, 0.1, 0.05);
        let mut bank = ThreadBank::new(2, 0.0);
        bank.update(3, 1.0, &c).unwrap();
        assert!(matches!(bank.update(3, 1.0, &c), Err(Error::Sequencing(_))));
        assert!(matches!(bank.update(1, 1.0, &c), Err(Error::Sequencing(_))));
        // skipping ahead is allowed
        bank.update(10, 1.0, &c).unwrap();
    }

    #[test]
    fn bank_rejects_mismatched_config() {
        let mut bank = ThreadBank::new(3, 0.0);
        assert!(matches!(
            bank.update(0, 1.0, &cfg(0.1, 0.1, 0.1, 0.05)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn margin_examples() {
        let m = margin_from_threshold(0.1, 1.0, 0.5);
        assert_eq!(m.case, MarginCase::Sqrt);
        assert!((m.d_bar - 0.2f64.sqrt()).abs() < 1e-12);

        let m = margin_from_threshold(0.2, 1.0, 0.5);
        assert_eq!(m.case, MarginCase::Trapezoid);
        assert!((m.d_bar - 0.65).abs() < 1e-12);

        let m = margin_from_threshold(0.125, 1.0, 0.5);
        assert_eq!(m.case, MarginCase::Trapezoid);
        assert!((m.d_bar - 0.5).abs() < 1e-12);
        assert!(((2.0f64 * 0.125).sqrt() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn margin_clamps_negative_thresholds() {
        let m = margin_from_threshold(-3.0, 2.0, 0.5);
        assert_eq!(m.case, MarginCase::Sqrt);
        assert_eq!(m.d_bar, 0.0);
    }

    #[test]
    fn coverage_bound_examples() {
        assert!((coverage_bound(1.0, 0.5, 0.5, 10_000) - 3e-4).abs() < 1e-15);
        assert_eq!(coverage_bound(1.0, 1.0, 1.0, 1), 2.0);
    }

    #[test]
    fn decaying_schedule_uses_global_index() {
        let s = StepSchedule::Decaying { eta1: 1.0 };
        assert_eq!(s.eta(0), 1.0);
        assert_eq!(s.eta(1), 1.0);
        assert!((s.eta(4) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn config_rejects_fractional_thread_count() {
        let mut c = OcpConfig::default();
        assert_eq!(c.horizon_steps().unwrap(), 10);
        c.horizon = 0.52;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.horizon = 0.5;
        c.alpha = 1.0;
        assert!(c.validate().is_err());
        c.alpha = 0.1;
        c.lipschitz = 0.0;
        assert!(c.validate().is_err());
        c.lipschitz = 1.0;
        c.schedule = StepSchedule::Constant { eta: 0.0 };
        assert!(c.validate().is_err());
    }

    #[test]
    fn estimator_initial_phase_then_updates() {
        let c = OcpConfig {
            d_init: 7.5,
            ..OcpConfig::default()
        };
        let mut est = SiOcp::new(c).unwrap();
        for k in 0..10u64 {
            let rec = est.step(k, k as f64 * 0.05, None).unwrap();
            assert_eq!(rec.case, MarginCase::InitialPhase);
            assert_eq!(rec.d_bar, 7.5);
            assert_eq!(rec.thread, k as usize % 10);
        }
        assert_eq!(est.bank().step_index, 0);
        let rec = est.step(10, 0.5, Some(0.3)).unwrap();
        assert_eq!(rec.thread, 0);
        assert!((rec.q_active - 0.2 * 0.9).abs() < 1e-15);
        assert_ne!(rec.case, MarginCase::InitialPhase);
        assert!(est.step(11, 0.55, None).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let c = OcpConfig::default();
        let mut est = SiOcp::new(c.clone()).unwrap();
        for k in 10..40u64 {
            est.step(k, k as f64 * 0.05, Some((k % 7) as f64 * 0.1)).unwrap();
        }
        let text = est.bank().to_json().unwrap();
        let bank = ThreadBank::from_json(&text).unwrap();
        assert_eq!(&bank, est.bank());
        let mut resumed = SiOcp::with_bank(c, bank).unwrap();
        let a = resumed.step(40, 2.0, Some(0.4)).unwrap();
        let b = est.step(40, 2.0, Some(0.4)).unwrap();
        assert_eq!(a, b);

        let broken = r#"{"thresholds":[0.0,1.0],"step_index":0,"update_counts":[0],"miss_counts":[0,0]}"#;
        assert!(matches!(
            ThreadBank::from_json(broken),
            Err(Error::DataIntegrity(_))
        ));
    }
}
