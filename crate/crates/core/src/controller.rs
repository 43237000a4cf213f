//! Reference robust predictive controller: cross-entropy-method planning on
//! the nominal model inside a contraction tube whose growth is driven by the
//! conformal margin, plus a linear ancillary feedback law.
//!
//! The margin bounds an acceleration. The tube recursion
//! `phi_{i+1} = phi_i + dt (-lambda_c phi_i + d_bar)` therefore produces a
//! velocity-like radius; it is mapped to a position radius once, as
//! `phi / lambda_c`, and that radius tightens the obstacle and altitude
//! constraints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MlpSnapshot;
use crate::plant::{
    rigid_body_derivative, rk4, ControlInput, InputBounds, PlantState, Vec3, INPUT_DIM, STATE_DIM,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub center: Vec3,
    pub radius: f64,
}

impl Obstacle {
    pub fn distance(&self, r: &Vec3) -> f64 {
        dist(r, &self.center)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub start: Vec3,
    pub goal: Vec3,
    /// Radius of the goal region, m.
    pub goal_radius: f64,
    /// Episode length, s.
    pub duration: f64,
    pub obstacles: Vec<Obstacle>,
    /// `[z_min, z_max]`, m.
    pub altitude: [f64; 2],
    pub vehicle_radius: f64,
}

impl Default for Scenario {
    /// A corridor pair at x = 3 m leaving a 0.7 m gap around y = 0, and a
    /// third sphere at x = 5.5 m slightly off the straight line to the goal.
    fn default() -> Self {
        Scenario {
            start: [-2.0, 0.0, 1.0],
            goal: [7.0, 0.0, 1.0],
            goal_radius: 0.5,
            duration: 5.0,
            obstacles: vec![
                Obstacle {
                    center: [3.0, 1.05, 1.0],
                    radius: 0.7,
                },
                Obstacle {
                    center: [3.0, -0.65, 1.0],
                    radius: 0.3,
                },
                Obstacle {
                    center: [5.5, 0.5, 1.0],
                    radius: 0.4,
                },
            ],
            altitude: [0.8, 1.2],
            vehicle_radius: 0.1,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.vehicle_radius >= 0.0 && self.goal_radius > 0.0) {
            return Err(Error::config("scenario duration and radii must be positive"));
        }
        if !(self.altitude[0] < self.altitude[1]) {
            return Err(Error::config("altitude band is empty"));
        }
        for (i, a) in self.obstacles.iter().enumerate() {
            if !(a.radius > 0.0) {
                return Err(Error::config(format!("obstacle {i} has a nonpositive radius")));
            }
            for b in &self.obstacles[i + 1..] {
                let gap = dist(&a.center, &b.center) - a.radius - b.radius;
                if gap > 0.0 && gap <= 2.0 * self.vehicle_radius {
                    return Err(Error::config(format!(
                        "gap of {gap:.3} m between obstacles is narrower than the vehicle"
                    )));
                }
            }
            for (name, p) in [("goal", &self.goal), ("start", &self.start)] {
                if a.distance(p) <= a.radius + self.vehicle_radius {
                    return Err(Error::config(format!("{name} lies inside obstacle {i}")));
                }
            }
        }
        Ok(())
    }

    /// Sum of constraint violations of a vehicle position for a given
    /// position-tube radius.
    pub fn violation(&self, r: &Vec3, tube: f64) -> f64 {
        let mut v = 0.0;
        for o in &self.obstacles {
            v += (o.radius + self.vehicle_radius + tube - o.distance(r)).max(0.0);
        }
        v += (self.altitude[0] + tube - r[2]).max(0.0);
        v += (r[2] - self.altitude[1] + tube).max(0.0);
        v
    }

    /// Clearance to the nearest obstacle surface, net of the vehicle radius.
    pub fn obstacle_clearance(&self, r: &Vec3) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.distance(r) - o.radius - self.vehicle_radius)
            .fold(f64::INFINITY, f64::min)
    }

    /// The first pair of obstacles sharing an x coordinate, as
    /// `(x, y_low, y_high)` bounding the free gap between them.
    pub fn corridor(&self) -> Option<(f64, f64, f64)> {
        for (i, a) in self.obstacles.iter().enumerate() {
            for b in &self.obstacles[i + 1..] {
                if (a.center[0] - b.center[0]).abs() < 1e-9 {
                    let (lo, hi) = if a.center[1] < b.center[1] { (a, b) } else { (b, a) };
                    return Some((a.center[0], lo.center[1] + lo.radius, hi.center[1] - hi.radius));
                }
            }
        }
        None
    }

    /// Whether a path crosses the corridor plane inside its gap.
    pub fn passes_corridor(&self, path: &[Vec3]) -> bool {
        let Some((xc, lo, hi)) = self.corridor() else {
            return false;
        };
        path.windows(2).any(|w| {
            let (a, b) = (w[0], w[1]);
            if (a[0] - xc) * (b[0] - xc) > 0.0 || a[0] == b[0] {
                return false;
            }
            let s = (xc - a[0]) / (b[0] - a[0]);
            let y = a[1] + s * (b[1] - a[1]);
            y > lo && y < hi
        })
    }

    pub fn in_goal(&self, r: &Vec3) -> bool {
        dist(r, &self.goal) <= self.goal_radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    /// Per-step distance to goal.
    pub goal: f64,
    /// Terminal distance to goal.
    pub terminal: f64,
    /// Body-rate effort.
    pub rate: f64,
    /// Thrust deviation from hover.
    pub thrust: f64,
    /// Quadratic penalty on roll/pitch beyond `attitude_limit`.
    pub attitude: f64,
    pub attitude_limit: f64,
    /// Quadratic penalty on speed beyond `speed_limit`.
    pub speed: f64,
    pub speed_limit: f64,
    /// Multiplies the summed constraint violation.
    pub violation: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            goal: 1.0,
            terminal: 5.0,
            rate: 0.01,
            thrust: 0.001,
            attitude: 100.0,
            attitude_limit: 0.6,
            speed: 10.0,
            speed_limit: 2.5,
            violation: 1e6,
        }
    }
}

/// What to do when no violation-free plan is found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Track the rest of the last feasible plan, then brake to a hover.
    HoldTail,
    /// Apply the least-violating plan anyway.
    LeastViolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Tube contraction rate, 1/s.
    pub lambda_c: f64,
    pub horizon_steps: usize,
    pub dt: f64,
    pub population: usize,
    pub elites: usize,
    pub iterations: usize,
    /// Initial sampling standard deviation per input channel.
    pub init_std: [f64; INPUT_DIM],
    pub min_std: [f64; INPUT_DIM],
    pub weights: CostWeights,
    pub bounds: InputBounds,
    /// Ancillary feedback gain (rows: roll rate, pitch rate, thrust). Derived
    /// from `gain_bandwidth` when absent.
    pub gain: Option<[[f64; STATE_DIM]; INPUT_DIM]>,
    /// Closed-loop pole used for the default gain, 1/s.
    pub gain_bandwidth: f64,
    pub mass: f64,
    pub gravity: f64,
    pub fallback: Fallback,
    pub seed: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            lambda_c: 5.0,
            horizon_steps: 10,
            dt: 0.05,
            population: 256,
            elites: 32,
            iterations: 5,
            init_std: [1.5, 1.5, 3.0],
            min_std: [0.05, 0.05, 0.1],
            weights: CostWeights::default(),
            bounds: InputBounds::default(),
            gain: None,
            gain_bandwidth: 2.0,
            mass: 1.0,
            gravity: 9.81,
            fallback: Fallback::HoldTail,
            seed: 0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_c > 0.0 && self.gain_bandwidth > 0.0 && self.dt > 0.0 && self.horizon_steps > 0) {
            return Err(Error::config(
                "controller needs lambda_c > 0, gain_bandwidth > 0, dt > 0 and a horizon",
            ));
        }
        if !(self.elites >= 1 && self.population > self.elites && self.iterations >= 1) {
            return Err(Error::config("CEM needs population > elites >= 1 and at least one iteration"));
        }
        Ok(())
    }

    pub fn feedback_gain(&self) -> [[f64; STATE_DIM]; INPUT_DIM] {
        self.gain
            .unwrap_or_else(|| default_gain(self.gain_bandwidth, self.mass, self.gravity))
    }
}

/// Pole placement on the hover linearization: each horizontal channel is a
/// triple integrator through the tilt angle, the vertical one a double
/// integrator, all placed at `-bandwidth`.
pub fn default_gain(bandwidth: f64, mass: f64, gravity: f64) -> [[f64; STATE_DIM]; INPUT_DIM] {
    let l = bandwidth;
    let k1 = l * l * l / gravity;
    let k2 = 3.0 * l * l / gravity;
    let k3 = 3.0 * l;
    [
        [0.0, k1, 0.0, 0.0, k2, 0.0, -k3, 0.0],
        [-k1, 0.0, 0.0, -k2, 0.0, 0.0, 0.0, -k3],
        [0.0, 0.0, -mass * l * l, 0.0, 0.0, -mass * 2.0 * l, 0.0, 0.0],
    ]
}

/// `phi_0 = phi0`, `phi_{i+1} = phi_i + dt (-lambda_c phi_i + d_bar)`.
pub fn tube_propagate(phi0: f64, d_bar: f64, lambda_c: f64, dt: f64, steps: usize) -> Vec<f64> {
    let mut phi = Vec::with_capacity(steps + 1);
    phi.push(phi0);
    for i in 0..steps {
        let p = phi[i];
        phi.push(p + dt * (-lambda_c * p + d_bar));
    }
    phi
}

#[derive(Debug, Clone, PartialEq)]
pub struct TubePlan {
    /// Nominal states `x_0..x_P`; `x_0` is the state planned from.
    pub nominal: Vec<PlantState>,
    pub inputs: Vec<ControlInput>,
    /// Tube radii in margin units.
    pub tube: Vec<f64>,
    /// Position-tube radii, m.
    pub tube_position: Vec<f64>,
    pub cost: f64,
    pub violation: f64,
    pub feasible: bool,
}

impl TubePlan {
    /// Smallest tightened clearance to an obstacle along the nominal path.
    pub fn min_clearance(&self, scenario: &Scenario) -> f64 {
        self.nominal
            .iter()
            .skip(1)
            .map(|x| scenario.obstacle_clearance(&x.position()))
            .fold(f64::INFINITY, f64::min)
    }
}

/// `u = u_0 + K (x - x_0)`, clipped to the input box.
pub fn ancillary_control(
    x: &PlantState,
    reference: &PlantState,
    nominal_input: &ControlInput,
    gain: &[[f64; STATE_DIM]; INPUT_DIM],
    bounds: &InputBounds,
) -> ControlInput {
    let mut u = nominal_input.0;
    for (row, ui) in gain.iter().zip(u.iter_mut()) {
        *ui += row
            .iter()
            .zip(x.0.iter().zip(&reference.0))
            .map(|(k, (a, b))| k * (a - b))
            .sum::<f64>();
    }
    bounds.clip(u)
}

/// Nominal model rollout with the learned residual evaluated once per step.
pub fn rollout(
    x0: &PlantState,
    inputs: &[ControlInput],
    model: &MlpSnapshot,
    cfg: &ControllerConfig,
) -> Vec<PlantState> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(*x0);
    for u in inputs {
        let x = states.last().expect("seeded");
        let learned = model.forward(&x.features());
        let next = rk4(x, 0.0, cfg.dt, |s, _| {
            rigid_body_derivative(s, u, &learned, cfg.mass, cfg.gravity)
        });
        states.push(next);
    }
    states
}

struct Evaluation {
    cost: f64,
    violation: f64,
}

fn evaluate(
    states: &[PlantState],
    inputs: &[ControlInput],
    tube_position: &[f64],
    scenario: &Scenario,
    cfg: &ControllerConfig,
) -> Evaluation {
    let w = &cfg.weights;
    let hover = cfg.mass * cfg.gravity;
    let mut cost = 0.0;
    let mut violation = 0.0;
    for u in inputs {
        cost += w.rate * (u.0[0] * u.0[0] + u.0[1] * u.0[1])
            + w.thrust * (u.0[2] - hover).powi(2);
    }
    for (i, x) in states.iter().enumerate().skip(1) {
        let r = x.position();
        cost += w.goal * dist(&r, &scenario.goal);
        for angle in [x.roll(), x.pitch()] {
            let excess = (angle.abs() - w.attitude_limit).max(0.0);
            cost += w.attitude * excess * excess;
        }
        let speed = x.velocity().iter().map(|v| v * v).sum::<f64>().sqrt();
        let excess = (speed - w.speed_limit).max(0.0);
        cost += w.speed * excess * excess;
        violation += scenario.violation(&r, tube_position[i]);
    }
    let last = states.last().expect("nonempty rollout").position();
    cost += w.terminal * dist(&last, &scenario.goal);
    if !cost.is_finite() {
        cost = f64::MAX;
    }
    Evaluation {
        cost: cost + w.violation * violation,
        violation,
    }
}

/// Cross-entropy search over input sequences from `x`, warm-started at
/// `warm_start` (one input per horizon step).
#[allow(clippy::too_many_arguments)]
pub fn plan(
    x: &PlantState,
    model: &MlpSnapshot,
    d_bar: f64,
    phi0: f64,
    warm_start: &[ControlInput],
    scenario: &Scenario,
    cfg: &ControllerConfig,
    seed: u64,
) -> TubePlan {
    let steps = cfg.horizon_steps;
    let tube = tube_propagate(phi0, d_bar.max(0.0), cfg.lambda_c, cfg.dt, steps);
    let tube_position: Vec<f64> = tube.iter().map(|p| p / cfg.lambda_c).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (lo, hi) = (cfg.bounds.lower(), cfg.bounds.upper());
    let mut mean: Vec<[f64; INPUT_DIM]> = (0..steps)
        .map(|i| warm_start.get(i).map_or([0.0, 0.0, cfg.mass * cfg.gravity], |u| u.0))
        .collect();
    let mut std: Vec<[f64; INPUT_DIM]> = vec![cfg.init_std; steps];

    let clip = |u: [f64; INPUT_DIM]| ControlInput(std::array::from_fn(|c| u[c].clamp(lo[c], hi[c])));
    let mut best: Option<(Vec<ControlInput>, Evaluation)> = None;
    let mut population: Vec<(Vec<ControlInput>, Evaluation)> = Vec::with_capacity(cfg.population);

    for _ in 0..cfg.iterations {
        population.clear();
        for member in 0..cfg.population {
            let inputs: Vec<ControlInput> = (0..steps)
                .map(|i| {
                    if member == 0 {
                        return clip(mean[i]);
                    }
                    clip(std::array::from_fn(|c| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mean[i][c] + std[i][c] * z
                    }))
                })
                .collect();
            let states = rollout(x, &inputs, model, cfg);
            let eval = evaluate(&states, &inputs, &tube_position, scenario, cfg);
            population.push((inputs, eval));
        }
        population.sort_by(|a, b| a.1.cost.total_cmp(&b.1.cost));
        let elites = &population[..cfg.elites];
        if best.as_ref().is_none_or(|(_, e)| elites[0].1.cost < e.cost) {
            best = Some((
                elites[0].0.clone(),
                Evaluation {
                    cost: elites[0].1.cost,
                    violation: elites[0].1.violation,
                },
            ));
        }
        let n = cfg.elites as f64;
        for i in 0..steps {
            for c in 0..INPUT_DIM {
                let m = elites.iter().map(|(u, _)| u[i].0[c]).sum::<f64>() / n;
                let var = elites.iter().map(|(u, _)| (u[i].0[c] - m).powi(2)).sum::<f64>() / n;
                mean[i][c] = m;
                std[i][c] = var.sqrt().max(cfg.min_std[c]);
            }
        }
    }

    let mean_inputs: Vec<ControlInput> = mean.iter().map(|u| clip(*u)).collect();
    let mean_states = rollout(x, &mean_inputs, model, cfg);
    let mean_eval = evaluate(&mean_states, &mean_inputs, &tube_position, scenario, cfg);
    let (inputs, eval) = match best {
        Some((u, e)) if e.cost < mean_eval.cost => (u, e),
        _ => (mean_inputs, mean_eval),
    };
    let nominal = rollout(x, &inputs, model, cfg);
    TubePlan {
        nominal,
        inputs,
        tube,
        tube_position,
        cost: eval.cost,
        violation: eval.violation,
        feasible: eval.violation == 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    Planned,
    HeldTail,
    HoverBrake,
    LeastViolation,
}

impl ControlMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControlMode::Planned => "planned",
            ControlMode::HeldTail => "held_tail",
            ControlMode::HoverBrake => "hover_brake",
            ControlMode::LeastViolation => "least_violation",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControlDecision {
    pub input: ControlInput,
    pub plan: TubePlan,
    pub mode: ControlMode,
    /// Position deviation from the previously predicted nominal state, m.
    pub tracking_error: f64,
    /// Position-tube radius the previous step predicted for now, m.
    pub predicted_tube: f64,
    /// Nominal position the executed control is referenced to over the next step.
    pub reference_next: Vec3,
}

/// Receding-horizon tube MPC with a carried tube state.
#[derive(Debug, Clone)]
pub struct TubeMpc {
    cfg: ControllerConfig,
    gain: [[f64; STATE_DIM]; INPUT_DIM],
    warm: Vec<ControlInput>,
    tube_state: f64,
    predicted_tube: f64,
    reference_next: Option<PlantState>,
    held: Option<(TubePlan, usize)>,
    anchor: Option<Vec3>,
}

impl TubeMpc {
    pub fn new(cfg: ControllerConfig) -> Result<Self> {
        cfg.validate()?;
        let gain = cfg.feedback_gain();
        Ok(TubeMpc {
            cfg,
            gain,
            warm: Vec::new(),
            tube_state: 0.0,
            predicted_tube: 0.0,
            reference_next: None,
            held: None,
            anchor: None,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn gain(&self) -> &[[f64; STATE_DIM]; INPUT_DIM] {
        &self.gain
    }

    pub fn reset(&mut self) {
        self.warm.clear();
        self.tube_state = 0.0;
        self.predicted_tube = 0.0;
        self.reference_next = None;
        self.held = None;
        self.anchor = None;
    }

    /// Plans from the measured state and returns the input to hold for the
    /// next controller period.
    pub fn control(
        &mut self,
        x: &PlantState,
        model: &MlpSnapshot,
        d_bar: f64,
        scenario: &Scenario,
        k: u64,
    ) -> ControlDecision {
        let tracking_error = self
            .reference_next
            .map_or(0.0, |r| dist(&x.position(), &r.position()));
        let phi0 = self.tube_state.max(self.cfg.lambda_c * tracking_error);
        let seed = self.cfg.seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let plan = plan(x, model, d_bar, phi0, &self.warm, scenario, &self.cfg, seed);
        let predicted_tube = self.predicted_tube;

        let (input, mode, reference) = if plan.feasible {
            self.held = Some((plan.clone(), 1));
            self.anchor = None;
            (plan.inputs[0], ControlMode::Planned, plan.nominal[1])
        } else {
            match self.cfg.fallback {
                Fallback::LeastViolation => {
                    (plan.inputs[0], ControlMode::LeastViolation, plan.nominal[1])
                }
                Fallback::HoldTail => self.fallback_input(x, model, scenario),
            }
        };

        self.warm = match mode {
            ControlMode::Planned | ControlMode::LeastViolation => {
                let mut w: Vec<ControlInput> = plan.inputs[1..].to_vec();
                w.push(*plan.inputs.last().expect("nonempty plan"));
                w
            }
            _ => Vec::new(),
        };
        if mode == ControlMode::HoverBrake {
            // The next plan restarts its nominal from the measured state.
            self.tube_state = 0.0;
            self.predicted_tube = 0.0;
            self.reference_next = None;
        } else {
            self.tube_state = plan.tube[1];
            self.predicted_tube = plan.tube_position[1];
            self.reference_next = Some(reference);
        }

        ControlDecision {
            input,
            plan,
            mode,
            tracking_error,
            predicted_tube,
            reference_next: reference.position(),
        }
    }

    fn fallback_input(
        &mut self,
        x: &PlantState,
        model: &MlpSnapshot,
        scenario: &Scenario,
    ) -> (ControlInput, ControlMode, PlantState) {
        if let Some((held, cursor)) = self.held.as_mut() {
            if *cursor < held.inputs.len() {
                let i = *cursor;
                *cursor += 1;
                let u = ancillary_control(x, &held.nominal[i], &held.inputs[i], &self.gain, &self.cfg.bounds);
                return (u, ControlMode::HeldTail, held.nominal[i + 1]);
            }
        }
        self.held = None;
        let anchor = *self.anchor.get_or_insert_with(|| {
            let [lo, hi] = scenario.altitude;
            let inset = 0.25 * (hi - lo);
            let mut p = x.position();
            p[2] = p[2].clamp(lo + inset, hi - inset);
            p
        });
        // Position hold at the anchor, with attitude and thrust feedforward
        // cancelling the predicted residual acceleration.
        let f = model.forward(&x.features());
        let w = [-f[0], -f[1], self.cfg.gravity - f[2]];
        let a = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt().max(1e-6);
        let limit = self.cfg.weights.attitude_limit;
        let pitch = (w[0] / a).clamp(-1.0, 1.0).asin().clamp(-limit, limit);
        let roll = (-w[1]).atan2(w[2]).clamp(-limit, limit);
        let mut reference = PlantState([0.0; STATE_DIM]);
        reference.0[..3].copy_from_slice(&anchor);
        reference.0[6] = roll;
        reference.0[7] = pitch;
        let hover = ControlInput([0.0, 0.0, self.cfg.mass * a]);
        let u = ancillary_control(x, &reference, &hover, &self.gain, &self.cfg.bounds);
        (u, ControlMode::HoverBrake, reference)
    }
}

pub fn dist(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}
