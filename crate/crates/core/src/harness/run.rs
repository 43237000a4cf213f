use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{derive_seed, RunConfig};
use super::logs::{joined, num, opt_bool, opt_num, RunLogs};
use super::metrics::{smoothed_rates, EpisodeMetrics, RATE_WINDOW, EpisodeTrace, Retrospective, RunMetrics, StepRecord};
use crate::conformal::{SiOcp, ThreadBank};
use crate::controller::TubeMpc;
use crate::error::Result;
use crate::history::HistoryStack;
use crate::model::{empirical_lipschitz, forward, residual_eps_acc, AdaptiveModel, Features};
use crate::plant::{
    rigid_body_derivative, ControlInput, Plant, PlantState,
};

/// Looped episodes draw their wind phase from `[0, WIND_PHASE_SPAN)` seconds.
const WIND_PHASE_SPAN: f64 = 100.0;
/// Fine steps between feature samples used for the network Lipschitz estimate.
const LIPSCHITZ_STRIDE: usize = 25;

const SEED_PLANT: u64 = 1;
const SEED_PLANNER: u64 = 2;
const SEED_WIND: u64 = 3;

#[derive(Debug, Clone)]
pub struct EpisodeReport {
    pub trace: EpisodeTrace,
    pub retrospective: Retrospective,
    pub metrics: EpisodeMetrics,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub metrics: RunMetrics,
    pub episodes: Vec<EpisodeReport>,
    pub bank: ThreadBank,
}

/// Owns the conformal estimator across episodes; the thresholds persist while
/// the plant, planner and model are reset at every episode start.
pub struct Runner {
    cfg: RunConfig,
    ocp: SiOcp,
    prior: AdaptiveModel,
    next_k: u64,
    logs: Option<RunLogs>,
    /// `(features, residual acceleration)` pairs, gathered when set.
    samples: Option<Vec<(Features, [f64; 3])>>,
}

impl Runner {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let ocp = SiOcp::new(cfg.ocp.clone())?;
        let prior = cfg.prior_model()?;
        let logs = match &cfg.output_dir {
            Some(dir) => Some(RunLogs::create(dir, cfg.dump_residuals)?),
            None => None,
        };
        Ok(Runner {
            cfg,
            ocp,
            prior,
            next_k: 0,
            logs,
            samples: None,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn bank(&self) -> &ThreadBank {
        self.ocp.bank()
    }

    pub fn prior(&self) -> &AdaptiveModel {
        &self.prior
    }

    /// Runs one episode. On a module error the partial logs are flushed and
    /// the error is returned.
    pub fn run_episode(&mut self, episode: usize) -> Result<EpisodeReport> {
        let mut trace = EpisodeTrace {
            episode,
            ..EpisodeTrace::default()
        };
        let outcome = self.simulate(episode, &mut trace);
        if let Err(e) = &outcome {
            trace.abort = Some(e.to_string());
        }
        let horizon = self.cfg.ocp.horizon_steps()?;
        let inner = self.cfg.inner_steps()?;
        let retrospective = Retrospective::compute(&trace, horizon, inner, &self.cfg.scenario);
        let metrics = EpisodeMetrics::compute(&trace, &retrospective, &self.cfg.scenario, self.cfg.grid_dt);
        if let Some(logs) = self.logs.as_mut() {
            write_conformal_rows(logs, &trace, &retrospective)?;
            logs.flush()?;
        }
        outcome?;
        Ok(EpisodeReport {
            trace,
            retrospective,
            metrics,
        })
    }

    fn simulate(&mut self, episode: usize, trace: &mut EpisodeTrace) -> Result<()> {
        let cfg = &self.cfg;
        let inner = cfg.inner_steps()?;
        let h = cfg.grid_dt;
        let (mass, gravity) = (cfg.plant.mass, cfg.plant.gravity);
        let scenario = &cfg.scenario;

        let mut plant_cfg = cfg.plant.clone();
        plant_cfg.seed = derive_seed(cfg.seed, SEED_PLANT, episode as u64);
        if episode > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_WIND, episode as u64));
            plant_cfg.wind_time_offset = rng.random_range(0.0..WIND_PHASE_SPAN);
        }
        trace.plant_seed = plant_cfg.seed;
        trace.wind_time_offset = plant_cfg.wind_time_offset;
        let mut plant = Plant::new(plant_cfg)?;

        let mut controller_cfg = cfg.controller.clone();
        controller_cfg.seed = derive_seed(cfg.seed, SEED_PLANNER, episode as u64);
        let mut mpc = TubeMpc::new(controller_cfg)?;

        let mut model = self.prior.clone();
        let mut history = HistoryStack::new(h, cfg.ocp.horizon)?;
        let f_nom = |x: &[f64], u: &[f64], theta: &[f64], out: &mut [f64]| {
            let state = PlantState(x.try_into().expect("state dimension"));
            let input = ControlInput(u.try_into().expect("input dimension"));
            let learned = forward(theta, &state.features());
            out.copy_from_slice(&rigid_body_derivative(&state, &input, &learned, mass, gravity));
        };

        let mut x = PlantState::at_rest(scenario.start);
        let mut u = ControlInput::hover(mass, gravity);
        let mut features: Vec<Features> = Vec::new();
        trace.positions.push(x.position());
        trace.max_theta_norm = model.theta_norm();

        for k_local in 0..cfg.episode_steps() {
            let k = self.next_k;
            self.next_k += 1;
            let t_k = (k_local * inner) as f64 * h;
            history.push(t_k, &x.0, &u.0, &model.theta)?;

            let (score, miss) = if self.ocp.is_active(t_k) {
                let s = history.integral_score(&f_nom)?;
                if let Some(logs) = self.logs.as_mut().filter(|l| l.wants_residuals()) {
                    for (i, r) in s.residual_cumsum.iter().enumerate() {
                        logs.residual(&[
                            episode.to_string(),
                            k.to_string(),
                            i.to_string(),
                            num(t_k - cfg.ocp.horizon + i as f64 * h),
                            joined(r),
                        ])?;
                    }
                }
                let bank = self.ocp.bank();
                let q_before = bank.thresholds[bank.active_thread(k)];
                (Some(s.value), Some(s.value > q_before))
            } else {
                (None, None)
            };
            let record = self.ocp.step(k, t_k, score)?;

            let decision = mpc.control(&x, &model.snapshot(), record.d_bar, scenario, k);
            u = decision.input;
            history.set_last_input(&u.0)?;

            trace.steps.push(StepRecord {
                k,
                k_local,
                t: t_k,
                thread: record.thread,
                score,
                q_active: record.q_active,
                d_bar: record.d_bar,
                case: record.case,
                miss_at_update: miss,
                mode: decision.mode,
                feasible: decision.plan.feasible,
                tracking_error: decision.tracking_error,
                predicted_tube: decision.predicted_tube,
                tube_next: decision.plan.tube_position[1],
            });
            if let Some(logs) = self.logs.as_mut() {
                logs.plan(&[
                    episode.to_string(),
                    k.to_string(),
                    num(t_k),
                    decision.mode.as_str().to_string(),
                    u8::from(decision.plan.feasible).to_string(),
                    num(decision.plan.cost),
                    num(decision.plan.violation),
                    num(decision.tracking_error),
                    num(decision.predicted_tube),
                    joined(&decision.plan.tube_position),
                ])?;
            }

            for s in 0..inner {
                let fine = k_local * inner + s;
                let t = fine as f64 * h;
                let out = plant.step(&x, &u, t, h)?;
                let learned_mid = model.predict(&out.midpoint.features());
                let lumped: [f64; 3] = std::array::from_fn(|i| out.disturbance_accel[i] - learned_mid[i]);
                let d_norm = lumped.iter().map(|v| v * v).sum::<f64>().sqrt();
                trace.d_norm.push(d_norm);
                trace.d_true.push(lumped);
                if fine % LIPSCHITZ_STRIDE == 0 {
                    features.push(x.features());
                }

                if let Some(logs) = self.logs.as_mut() {
                    let mut row = Vec::with_capacity(18);
                    row.push(episode.to_string());
                    row.push(num(t));
                    row.extend(x.0.iter().map(|v| num(*v)));
                    row.extend(u.0.iter().map(|v| num(*v)));
                    row.push(num(model.theta_norm()));
                    row.push(num(d_norm));
                    row.extend(out.wind.iter().map(|v| num(*v)));
                    logs.trajectory(&row)?;
                }

                if cfg.adapt || self.samples.is_some() {
                    let xi = x.features();
                    let learned = model.predict(&xi);
                    let f = rigid_body_derivative(&x, &u, &learned, mass, gravity);
                    let eps = residual_eps_acc(
                        &out.state.velocity(),
                        &x.velocity(),
                        h,
                        &[f[3], f[4], f[5]],
                    );
                    if let Some(samples) = self.samples.as_mut() {
                        samples.push((xi, std::array::from_fn(|i| eps[i] + learned[i])));
                    }
                    if cfg.adapt {
                        model.adapt_step(&xi, &eps, &cfg.adaptation)?;
                        trace.max_theta_norm = trace.max_theta_norm.max(model.theta_norm());
                    }
                }

                x = out.state;
                trace.positions.push(x.position());
                if s + 1 < inner {
                    history.push(t + h, &x.0, &u.0, &model.theta)?;
                }
            }
        }
        trace.empirical_lipschitz_f = empirical_lipschitz(&model.theta, &features);
        Ok(())
    }

    /// Runs every configured episode and writes `metrics.json` and
    /// `bank.json` when an output directory is set.
    pub fn run_all(mut self) -> Result<RunReport> {
        let mut episodes = Vec::with_capacity(self.cfg.episodes);
        for e in 0..self.cfg.episodes {
            episodes.push(self.run_episode(e)?);
        }
        let rates: Vec<f64> = episodes
            .iter()
            .flat_map(|e| smoothed_rates(&e.trace.d_true, self.cfg.grid_dt, RATE_WINDOW))
            .collect();
        let metrics = RunMetrics::pool(
            episodes.iter().map(|e| e.metrics.clone()).collect(),
            self.cfg.adapt,
            self.cfg.seed,
            self.cfg.ocp.lipschitz,
            self.ocp.bank().empirical_coverage(),
            &rates,
        );
        if let Some(logs) = self.logs.as_mut() {
            logs.write_json("metrics.json", &serde_json::to_string_pretty(&metrics)?)?;
            logs.write_json("bank.json", &self.ocp.bank().to_json()?)?;
        }
        Ok(RunReport {
            metrics,
            episodes,
            bank: self.ocp.into_bank(),
        })
    }
}

fn write_conformal_rows(logs: &mut RunLogs, trace: &EpisodeTrace, retro: &Retrospective) -> Result<()> {
    for (i, s) in trace.steps.iter().enumerate() {
        logs.conformal(&[
            trace.episode.to_string(),
            s.k.to_string(),
            s.k_local.to_string(),
            num(s.t),
            s.thread.to_string(),
            opt_num(s.score),
            num(s.q_active),
            num(s.d_bar),
            s.case.as_str().to_string(),
            opt_bool(s.miss_at_update),
            opt_bool(retro.covered_score[i]),
            opt_bool(retro.covered_pointwise[i]),
        ])?;
    }
    Ok(())
}

/// Convenience wrapper: build a runner and run all episodes.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    Runner::new(cfg.clone())?.run_all()
}

/// Runs the configured episodes with adaptation off and fits the prior's
/// output layer to the observed residual accelerations.
pub fn pretrain(cfg: &RunConfig, ridge: f64) -> Result<AdaptiveModel> {
    let mut cfg = cfg.clone();
    cfg.adapt = false;
    cfg.output_dir = None;
    let mut runner = Runner::new(cfg.clone())?;
    runner.samples = Some(Vec::new());
    for e in 0..cfg.episodes {
        runner.run_episode(e)?;
    }
    let data = runner.samples.take().unwrap_or_default();
    let mut model = runner.prior.clone();
    model.pretrain_output_layer(&data, ridge)?;
    Ok(model)
}
