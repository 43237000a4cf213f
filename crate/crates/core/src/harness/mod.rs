//! Closed-loop orchestration: simulation, adaptation, staggered conformal
//! updates, planning, logging, metrics, property suites and sweeps.

pub mod config;
pub mod logs;
pub mod metrics;
pub mod run;
pub mod sweep;
pub mod verify;

pub use config::{derive_seed, load_scenario, RunConfig};
pub use metrics::{EpisodeMetrics, EpisodeTrace, Retrospective, RunMetrics, StepRecord};
pub use run::{pretrain, run, EpisodeReport, RunReport, Runner};
pub use sweep::{sweep, SweepGrid};
pub use verify::{run_suite, SuiteReport, SuiteScale, SUITES};

use serde::Serialize;

use crate::error::Result;
use metrics::percentile;

/// Disturbance-rate statistics used to pick `L_d`.
#[derive(Debug, Clone, Serialize)]
pub struct Calibration {
    pub samples: usize,
    pub percentile: f64,
    pub rate_at_percentile: f64,
    pub rate_max: f64,
    pub configured: f64,
}

/// Runs the configuration and reports the noise-smoothed lumped-residual
/// rate `|d'|` at the requested percentile.
pub fn calibrate(cfg: &RunConfig, pct: f64) -> Result<Calibration> {
    let mut cfg = cfg.clone();
    cfg.output_dir = None;
    let report = run(&cfg)?;
    let rates: Vec<f64> = report
        .episodes
        .iter()
        .flat_map(|e| metrics::smoothed_rates(&e.trace.d_true, cfg.grid_dt, metrics::RATE_WINDOW))
        .collect();
    Ok(Calibration {
        samples: rates.len(),
        percentile: pct,
        rate_at_percentile: percentile(&rates, pct),
        rate_max: rates.iter().copied().fold(0.0, f64::max),
        configured: cfg.ocp.lipschitz,
    })
}
