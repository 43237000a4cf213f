use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::logs::{num, opt_num};
use super::metrics::RunMetrics;
use super::run::run;
use crate::conformal::StepSchedule;
use crate::error::{Error, Result};

/// Parameter grid. Omitted axes keep the base configuration's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    /// Base run configuration.
    pub config: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub alpha: Vec<f64>,
    /// Constant step sizes.
    #[serde(default)]
    pub eta: Vec<f64>,
    #[serde(default)]
    pub lipschitz: Vec<f64>,
    #[serde(default)]
    pub lambda_c: Vec<f64>,
    #[serde(default)]
    pub adapt: Vec<bool>,
    pub episodes: Option<usize>,
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    pub alpha: f64,
    pub eta: Option<f64>,
    pub lipschitz: f64,
    pub lambda_c: f64,
    pub adapt: bool,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub cell: usize,
    pub params: Cell,
    pub seed: u64,
    pub outcome: std::result::Result<RunMetrics, String>,
}

impl SweepGrid {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut grid: SweepGrid = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut grid.config, &mut grid.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if grid.seeds.is_empty() {
            return Err(Error::config("sweep grid needs at least one seed"));
        }
        Ok(grid)
    }

    pub fn cells(&self, base: &RunConfig) -> Vec<Cell> {
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let base_eta = match base.ocp.schedule {
            StepSchedule::Constant { eta } => Some(eta),
            StepSchedule::Decaying { .. } => None,
        };
        let etas: Vec<Option<f64>> = if self.eta.is_empty() {
            vec![base_eta]
        } else {
            self.eta.iter().map(|e| Some(*e)).collect()
        };
        let adapts = if self.adapt.is_empty() { vec![base.adapt] } else { self.adapt.clone() };
        let mut cells = Vec::new();
        for alpha in or(&self.alpha, base.ocp.alpha) {
            for eta in &etas {
                for lipschitz in or(&self.lipschitz, base.ocp.lipschitz) {
                    for lambda_c in or(&self.lambda_c, base.controller.lambda_c) {
                        for adapt in &adapts {
                            cells.push(Cell {
                                alpha,
                                eta: *eta,
                                lipschitz,
                                lambda_c,
                                adapt: *adapt,
                            });
                        }
                    }
                }
            }
        }
        cells
    }
}

pub fn cell_config(base: &RunConfig, cell: &Cell, seed: u64, episodes: Option<usize>) -> RunConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.output_dir = None;
    cfg.adapt = cell.adapt;
    cfg.ocp.alpha = cell.alpha;
    if let Some(eta) = cell.eta {
        cfg.ocp.schedule = StepSchedule::Constant { eta };
    }
    cfg.ocp.lipschitz = cell.lipschitz;
    cfg.controller.lambda_c = cell.lambda_c;
    if let Some(n) = episodes {
        cfg.episodes = n;
    }
    cfg
}

/// Runs every `(cell, seed)` pair in parallel; failures are recorded per row.
pub fn sweep(grid: &SweepGrid, base: &RunConfig) -> Vec<SweepRow> {
    let cells = grid.cells(base);
    let jobs: Vec<(usize, Cell, u64)> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, c)| grid.seeds.iter().map(move |s| (i, *c, *s)))
        .collect();
    jobs.par_iter()
        .map(|(i, cell, seed)| {
            let cfg = cell_config(base, cell, *seed, grid.episodes);
            SweepRow {
                cell: *i,
                params: *cell,
                seed: *seed,
                outcome: run(&cfg).map(|r| r.metrics).map_err(|e| e.to_string()),
            }
        })
        .collect()
}

pub const SWEEP_HEADER: &str = "cell,alpha,eta,lipschitz,lambda_c,adapt,seed,status,error,episodes,conformal_updates,coverage_pointwise,coverage_score,mean_d_bar,max_d_bar,mean_tube,constraint_violations,episodes_reaching_goal,corridor_passages,infeasible_plans,safe_fraction";

pub fn write_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut lines = vec![SWEEP_HEADER.to_string()];
    for r in rows {
        let p = &r.params;
        let mut f = vec![
            r.cell.to_string(),
            num(p.alpha),
            opt_num(p.eta),
            num(p.lipschitz),
            num(p.lambda_c),
            u8::from(p.adapt).to_string(),
            r.seed.to_string(),
        ];
        match &r.outcome {
            Ok(m) => f.extend([
                "ok".to_string(),
                String::new(),
                m.episodes.to_string(),
                m.conformal_updates.to_string(),
                opt_num(m.coverage_pointwise),
                opt_num(m.coverage_score),
                opt_num(m.mean_d_bar),
                opt_num(m.max_d_bar),
                num(m.mean_tube),
                m.constraint_violations.to_string(),
                m.episodes_reaching_goal.to_string(),
                m.corridor_passages.to_string(),
                m.infeasible_plans.to_string(),
                opt_num(m.safe_fraction),
            ]),
            Err(e) => {
                f.push("error".to_string());
                f.push(format!("\"{}\"", e.replace('"', "'")));
                f.extend(std::iter::repeat_n(String::new(), 12));
            }
        }
        lines.push(f.join(","));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, lines.join("\n") + "\n").map_err(|e| Error::io(path, e))
}
