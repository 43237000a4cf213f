//! Ground-truth quadcopter: position, velocity, roll and pitch driven by body
//! rates and collective thrust, subject to quadratic body-frame drag against a
//! spatio-temporal wind field plus Gaussian force noise.
//!
//! World frame is z-up; gravity is `[0, 0, -g]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Features;

pub const STATE_DIM: usize = 8;
pub const INPUT_DIM: usize = 3;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// `x = [r, v, roll, pitch]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState(pub [f64; STATE_DIM]);

impl PlantState {
    pub fn at_rest(position: Vec3) -> Self {
        let mut x = [0.0; STATE_DIM];
        x[..3].copy_from_slice(&position);
        PlantState(x)
    }

    pub fn position(&self) -> Vec3 {
        [self.0[0], self.0[1], self.0[2]]
    }

    pub fn velocity(&self) -> Vec3 {
        [self.0[3], self.0[4], self.0[5]]
    }

    pub fn roll(&self) -> f64 {
        self.0[6]
    }

    pub fn pitch(&self) -> f64 {
        self.0[7]
    }

    /// Input features of the residual network.
    pub fn features(&self) -> Features {
        [self.0[3], self.0[4], self.0[5], self.0[6], self.0[7]]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `u = [roll rate, pitch rate, thrust]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput(pub [f64; INPUT_DIM]);

impl ControlInput {
    pub fn hover(mass: f64, gravity: f64) -> Self {
        ControlInput([0.0, 0.0, mass * gravity])
    }

    pub fn roll_rate(&self) -> f64 {
        self.0[0]
    }

    pub fn pitch_rate(&self) -> f64 {
        self.0[1]
    }

    pub fn thrust(&self) -> f64 {
        self.0[2]
    }
}

/// Box bounds on body rates and thrust.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputBounds {
    pub max_rate: f64,
    pub min_thrust: f64,
    pub max_thrust: f64,
}

impl Default for InputBounds {
    fn default() -> Self {
        InputBounds {
            max_rate: 4.0,
            min_thrust: 0.0,
            max_thrust: 2.0 * 9.81,
        }
    }
}

impl InputBounds {
    pub fn lower(&self) -> [f64; INPUT_DIM] {
        [-self.max_rate, -self.max_rate, self.min_thrust]
    }

    pub fn upper(&self) -> [f64; INPUT_DIM] {
        [self.max_rate, self.max_rate, self.max_thrust]
    }

    pub fn clip(&self, u: [f64; INPUT_DIM]) -> ControlInput {
        let (lo, hi) = (self.lower(), self.upper());
        ControlInput(std::array::from_fn(|i| u[i].clamp(lo[i], hi[i])))
    }

    pub fn contains(&self, u: &ControlInput, tol: f64) -> bool {
        let (lo, hi) = (self.lower(), self.upper());
        (0..INPUT_DIM).all(|i| u.0[i] >= lo[i] - tol && u.0[i] <= hi[i] + tol)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindDragConfig {
    pub mass: f64,
    pub gravity: f64,
    /// Diagonal of the body-frame drag matrix.
    pub drag: Vec3,
    /// Per-axis standard deviation of the force noise, N.
    pub noise_std: Vec3,
    pub wind_enabled: bool,
    pub drag_enabled: bool,
    pub noise_enabled: bool,
    /// Shift applied to the wind field's time argument (phase randomization).
    pub wind_time_offset: f64,
    pub bounds: InputBounds,
    pub seed: u64,
}

impl Default for WindDragConfig {
    fn default() -> Self {
        WindDragConfig {
            mass: 1.0,
            gravity: 9.81,
            drag: [0.3, 0.3, 0.6],
            noise_std: [0.2, 0.2, 0.1],
            wind_enabled: true,
            drag_enabled: true,
            noise_enabled: true,
            wind_time_offset: 0.0,
            bounds: InputBounds::default(),
            seed: 0,
        }
    }
}

impl WindDragConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) {
            return Err(Error::config("mass must be positive"));
        }
        if self.drag.iter().chain(&self.noise_std).any(|v| !(*v >= 0.0)) {
            return Err(Error::config("drag coefficients and noise levels must be nonnegative"));
        }
        Ok(())
    }

    /// No wind, drag or noise.
    pub fn undisturbed(mut self) -> Self {
        self.wind_enabled = false;
        self.drag_enabled = false;
        self.noise_enabled = false;
        self
    }

    pub fn wind_at(&self, r: &Vec3, t: f64) -> Vec3 {
        if self.wind_enabled {
            wind_velocity(r, t + self.wind_time_offset)
        } else {
            [0.0; 3]
        }
    }
}

/// Wind velocity field, m/s.
pub fn wind_velocity(r: &Vec3, t: f64) -> Vec3 {
    [
        2.0 * (0.5 * t).sin() + (2.0 * t).sin() + 0.5 * r[0],
        2.4 * (0.4 * t).cos() + 1.2 * (1.8 * t).cos() + 0.5 * r[1],
        (0.3 * t).sin() + 0.2 * r[2],
    ]
}

/// Body-to-world rotation for zero yaw: pitch about y, then roll about the
/// world x axis, so that the body z axis maps to
/// `[sin(pitch), -cos(pitch) sin(roll), cos(pitch) cos(roll)]`.
pub fn rotation_body_to_world(roll: f64, pitch: f64) -> Mat3 {
    let (sp, cp) = roll.sin_cos();
    let (st, ct) = pitch.sin_cos();
    [
        [ct, 0.0, st],
        [sp * st, cp, -sp * ct],
        [-cp * st, sp, cp * ct],
    ]
}

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

pub fn mat_t_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    std::array::from_fn(|i| m[0][i] * v[0] + m[1][i] * v[1] + m[2][i] * v[2])
}

/// Thrust direction in the world frame (third column of the rotation).
pub fn thrust_direction(roll: f64, pitch: f64) -> Vec3 {
    [pitch.sin(), -pitch.cos() * roll.sin(), pitch.cos() * roll.cos()]
}

/// Aerodynamic force `-m R D (v_b |v_b|) + noise`, N.
pub fn true_disturbance(x: &PlantState, t: f64, cfg: &WindDragConfig, noise: &Vec3) -> Vec3 {
    let mut force = *noise;
    if cfg.drag_enabled {
        let wind = cfg.wind_at(&x.position(), t);
        let v = x.velocity();
        let v_rel: Vec3 = std::array::from_fn(|i| v[i] - wind[i]);
        let rot = rotation_body_to_world(x.roll(), x.pitch());
        let v_b = mat_t_vec(&rot, &v_rel);
        let speed = (v_b[0] * v_b[0] + v_b[1] * v_b[1] + v_b[2] * v_b[2]).sqrt();
        let drag_body: Vec3 = std::array::from_fn(|i| cfg.drag[i] * v_b[i] * speed);
        let drag_world = mat_vec(&rot, &drag_body);
        for i in 0..3 {
            force[i] -= cfg.mass * drag_world[i];
        }
    }
    force
}

/// Known part of the dynamics plus an additive acceleration term on the
/// velocity rows (the learned residual for the nominal model, the true
/// disturbance divided by mass for the plant).
pub fn rigid_body_derivative(
    x: &PlantState,
    u: &ControlInput,
    accel: &Vec3,
    mass: f64,
    gravity: f64,
) -> [f64; STATE_DIM] {
    let dir = thrust_direction(x.roll(), x.pitch());
    let a = u.thrust() / mass;
    [
        x.0[3],
        x.0[4],
        x.0[5],
        dir[0] * a + accel[0],
        dir[1] * a + accel[1],
        dir[2] * a - gravity + accel[2],
        u.roll_rate(),
        u.pitch_rate(),
    ]
}

pub fn plant_derivative(
    x: &PlantState,
    u: &ControlInput,
    t: f64,
    cfg: &WindDragConfig,
    noise: &Vec3,
) -> [f64; STATE_DIM] {
    let force = true_disturbance(x, t, cfg, noise);
    let accel = force.map(|f| f / cfg.mass);
    rigid_body_derivative(x, u, &accel, cfg.mass, cfg.gravity)
}

/// One classical Runge-Kutta step of `f(t, x)`.
pub fn rk4<F>(x: &PlantState, t: f64, h: f64, f: F) -> PlantState
where
    F: Fn(&PlantState, f64) -> [f64; STATE_DIM],
{
    let add = |a: &PlantState, k: &[f64; STATE_DIM], s: f64| {
        PlantState(std::array::from_fn(|i| a.0[i] + s * k[i]))
    };
    let k1 = f(x, t);
    let k2 = f(&add(x, &k1, 0.5 * h), t + 0.5 * h);
    let k3 = f(&add(x, &k2, 0.5 * h), t + 0.5 * h);
    let k4 = f(&add(x, &k3, h), t + h);
    PlantState(std::array::from_fn(|i| {
        x.0[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: PlantState,
    /// Average of the start and end states, taken as the step midpoint.
    pub midpoint: PlantState,
    /// `Delta_v / m` at the step midpoint, noise included.
    pub disturbance_accel: Vec3,
    pub wind: Vec3,
}

/// Simulator with its own noise stream.
#[derive(Debug, Clone)]
pub struct Plant {
    cfg: WindDragConfig,
    rng: ChaCha8Rng,
}

impl Plant {
    pub fn new(cfg: WindDragConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Plant { cfg, rng })
    }

    pub fn config(&self) -> &WindDragConfig {
        &self.cfg
    }

    pub fn sample_noise(&mut self) -> Vec3 {
        let mut n = [0.0; 3];
        if self.cfg.noise_enabled {
            for (v, s) in n.iter_mut().zip(&self.cfg.noise_std) {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                *v = s * z;
            }
        }
        n
    }

    /// Advances by `h` with `u` held and a fresh noise draw held across all
    /// Runge-Kutta stages.
    pub fn step(&mut self, x: &PlantState, u: &ControlInput, t: f64, h: f64) -> Result<StepOutcome> {
        let noise = self.sample_noise();
        step_with_noise(x, u, t, h, &self.cfg, &noise)
    }
}

pub fn step_with_noise(
    x: &PlantState,
    u: &ControlInput,
    t: f64,
    h: f64,
    cfg: &WindDragConfig,
    noise: &Vec3,
) -> Result<StepOutcome> {
    if !(h > 0.0) {
        return Err(Error::config("integration step must be positive"));
    }
    if !cfg.bounds.contains(u, 1e-9) || u.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::SimulationAbort {
            t,
            reason: format!("input {:?} outside bounds", u.0),
        });
    }
    let next = rk4(x, t, h, |s, tau| plant_derivative(s, u, tau, cfg, noise));
    let half = std::f64::consts::FRAC_PI_2;
    if next.0.iter().any(|v| !v.is_finite()) || next.roll().abs() >= half || next.pitch().abs() >= half
    {
        return Err(Error::SimulationAbort {
            t: t + h,
            reason: format!(
                "attitude left (-pi/2, pi/2): roll {:.4}, pitch {:.4}",
                next.roll(),
                next.pitch()
            ),
        });
    }
    let midpoint = PlantState(std::array::from_fn(|i| 0.5 * (x.0[i] + next.0[i])));
    let t_mid = t + 0.5 * h;
    let force = true_disturbance(&midpoint, t_mid, cfg, noise);
    Ok(StepOutcome {
        state: next,
        midpoint,
        disturbance_accel: force.map(|f| f / cfg.mass),
        wind: cfg.wind_at(&midpoint.position(), t_mid),
    })
}
