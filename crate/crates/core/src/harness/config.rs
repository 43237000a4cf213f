use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conformal::OcpConfig;
use crate::controller::{ControllerConfig, Scenario};
use crate::error::{Error, Result};
use crate::model::{AdaptConfig, AdaptiveModel};
use crate::plant::WindDragConfig;

const CONSISTENCY_TOLERANCE: f64 = 1e-9;

/// Everything one `run` needs. Relative paths are resolved against the
/// directory of the file the configuration was loaded from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub adapt: bool,
    pub episodes: usize,
    pub output_dir: Option<PathBuf>,
    /// Scenario file; replaces the inline `scenario` table when set.
    pub scenario_file: Option<PathBuf>,
    pub scenario: Scenario,
    /// Prior parameter checkpoint; a seeded random prior is used when absent.
    pub prior_file: Option<PathBuf>,
    pub prior_seed: u64,
    pub prior_scale: f64,
    /// Fine simulation and history grid, s.
    pub grid_dt: f64,
    /// Write the cumulative residual curve of every score to `residuals.csv`.
    pub dump_residuals: bool,
    pub ocp: OcpConfig,
    pub adaptation: AdaptConfig,
    pub plant: WindDragConfig,
    pub controller: ControllerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            adapt: true,
            episodes: 1,
            output_dir: None,
            scenario_file: None,
            scenario: Scenario::default(),
            prior_file: None,
            prior_seed: 0,
            prior_scale: 0.1,
            grid_dt: 0.01,
            dump_residuals: false,
            ocp: OcpConfig::default(),
            adaptation: AdaptConfig::default(),
            plant: WindDragConfig::default(),
            controller: ControllerConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML file, loads any referenced scenario file and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        if let Some(file) = &cfg.scenario_file {
            cfg.scenario = load_scenario(file)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.output_dir, &mut self.scenario_file, &mut self.prior_file]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Checks each section and that periods, horizons and physical constants
    /// agree across modules.
    pub fn validate(&self) -> Result<()> {
        self.ocp.validate()?;
        self.adaptation.validate()?;
        self.plant.validate()?;
        self.controller.validate()?;
        self.scenario.validate()?;
        if self.episodes == 0 {
            return Err(Error::config("episodes must be at least 1"));
        }
        if !(self.grid_dt > 0.0 && self.prior_scale >= 0.0) {
            return Err(Error::config("grid_dt must be positive and prior_scale nonnegative"));
        }
        let near = |a: f64, b: f64| (a - b).abs() <= CONSISTENCY_TOLERANCE * a.abs().max(b.abs()).max(1.0);
        if !near(self.ocp.dt, self.controller.dt) {
            return Err(Error::config(format!(
                "conformal dt {} differs from controller dt {}",
                self.ocp.dt, self.controller.dt
            )));
        }
        let planned = self.controller.horizon_steps as f64 * self.controller.dt;
        if !near(self.ocp.horizon, planned) {
            return Err(Error::config(format!(
                "conformal horizon {} s differs from planning horizon {planned} s",
                self.ocp.horizon
            )));
        }
        if !near(self.adaptation.dt, self.grid_dt) {
            return Err(Error::config("adaptation dt must equal grid_dt"));
        }
        self.inner_steps()?;
        if !near(self.plant.mass, self.controller.mass) || !near(self.plant.gravity, self.controller.gravity) {
            return Err(Error::config("plant and controller disagree on mass or gravity"));
        }
        if self.plant.bounds != self.controller.bounds {
            return Err(Error::config("plant and controller disagree on input bounds"));
        }
        Ok(())
    }

    /// Fine steps per controller period.
    pub fn inner_steps(&self) -> Result<usize> {
        let ratio = self.ocp.dt / self.grid_dt;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > CONSISTENCY_TOLERANCE * n {
            return Err(Error::config(format!(
                "controller period {} s is not a multiple of grid_dt {} s",
                self.ocp.dt, self.grid_dt
            )));
        }
        Ok(n as usize)
    }

    /// Controller steps per episode.
    pub fn episode_steps(&self) -> usize {
        (self.scenario.duration / self.ocp.dt).round() as usize
    }

    pub fn prior_model(&self) -> Result<AdaptiveModel> {
        match &self.prior_file {
            Some(path) => AdaptiveModel::load(path),
            None => Ok(AdaptiveModel::random(self.prior_seed, self.prior_scale)),
        }
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let scenario: Scenario = toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    scenario.validate()?;
    Ok(scenario)
}

/// Decorrelates per-episode seeds drawn from one base seed.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
