//! Adaptive residual predictor: a 5-50-50-50-3 ReLU network whose flattened
//! parameter vector is adapted online by a regularized gradient law.
//!
//! Parameters are flattened layer by layer, each layer as its weight matrix
//! (row-major, `fan_out x fan_in`) followed by its bias.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LAYER_SIZES: [usize; 5] = [5, 50, 50, 50, 3];
pub const INPUT_DIM: usize = 5;
pub const OUTPUT_DIM: usize = 3;
pub const PARAM_COUNT: usize = param_count();
pub const THETA_NORM_BOUND: f64 = 10.0;

const LAYERS: usize = LAYER_SIZES.len() - 1;

const fn param_count() -> usize {
    let mut total = 0;
    let mut l = 0;
    while l < LAYERS {
        total += LAYER_SIZES[l] * LAYER_SIZES[l + 1] + LAYER_SIZES[l + 1];
        l += 1;
    }
    total
}

/// Offsets of one layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Span {
    weights: usize,
    bias: usize,
    fan_in: usize,
    fan_out: usize,
}

const fn spans() -> [Span; LAYERS] {
    let mut out = [Span {
        weights: 0,
        bias: 0,
        fan_in: 0,
        fan_out: 0,
    }; LAYERS];
    let mut offset = 0;
    let mut l = 0;
    while l < LAYERS {
        let fan_in = LAYER_SIZES[l];
        let fan_out = LAYER_SIZES[l + 1];
        out[l] = Span {
            weights: offset,
            bias: offset + fan_in * fan_out,
            fan_in,
            fan_out,
        };
        offset += fan_in * fan_out + fan_out;
        l += 1;
    }
    out
}

const SPANS: [Span; LAYERS] = spans();

/// Network input `[v_x, v_y, v_z, roll, pitch]`.
pub type Features = [f64; INPUT_DIM];
pub type Output = [f64; OUTPUT_DIM];

#[inline]
fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

/// Pre-activations of the hidden layers plus their activations.
struct Trace {
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
}

fn trace(theta: &[f64], xi: &Features) -> (Output, Trace) {
    debug_assert_eq!(theta.len(), PARAM_COUNT);
    let mut input: Vec<f64> = xi.to_vec();
    let mut pre = Vec::with_capacity(LAYERS - 1);
    let mut act = Vec::with_capacity(LAYERS);
    act.push(input.clone());
    let mut out = [0.0; OUTPUT_DIM];
    for (l, s) in SPANS.iter().enumerate() {
        let w = &theta[s.weights..s.bias];
        let b = &theta[s.bias..s.bias + s.fan_out];
        let z: Vec<f64> = (0..s.fan_out)
            .map(|o| {
                let row = &w[o * s.fan_in..(o + 1) * s.fan_in];
                b[o] + row.iter().zip(&input).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect();
        if l + 1 == LAYERS {
            out.copy_from_slice(&z);
        } else {
            input = z.iter().copied().map(relu).collect();
            pre.push(z);
            act.push(input.clone());
        }
    }
    (out, Trace { pre, act })
}

/// Network output `F_nn(xi; theta)`.
pub fn forward(theta: &[f64], xi: &Features) -> Output {
    trace(theta, xi).0
}

/// Vector-Jacobian product `J^T g` with `J = dF_nn / dtheta`.
pub fn vjp(theta: &[f64], xi: &Features, g: &Output) -> Vec<f64> {
    let (_, tr) = trace(theta, xi);
    let mut grad = vec![0.0; PARAM_COUNT];
    let mut delta: Vec<f64> = g.to_vec();
    for l in (0..LAYERS).rev() {
        let s = SPANS[l];
        let input = &tr.act[l];
        for o in 0..s.fan_out {
            let d = delta[o];
            grad[s.bias + o] = d;
            if d != 0.0 {
                let row = &mut grad[s.weights + o * s.fan_in..s.weights + (o + 1) * s.fan_in];
                for (gw, a) in row.iter_mut().zip(input) {
                    *gw = d * a;
                }
            }
        }
        if l == 0 {
            break;
        }
        let w = &theta[s.weights..s.bias];
        let pre = &tr.pre[l - 1];
        let mut back = vec![0.0; s.fan_in];
        for o in 0..s.fan_out {
            let d = delta[o];
            if d == 0.0 {
                continue;
            }
            for (bk, wk) in back.iter_mut().zip(&w[o * s.fan_in..(o + 1) * s.fan_in]) {
                *bk += wk * d;
            }
        }
        for (bk, z) in back.iter_mut().zip(pre) {
            if *z <= 0.0 {
                *bk = 0.0;
            }
        }
        delta = back;
    }
    grad
}

/// Dense `3 x d` Jacobian of the output with respect to the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    /// Row-major, `OUTPUT_DIM` rows of `PARAM_COUNT` entries.
    pub data: Vec<f64>,
}

impl Jacobian {
    pub fn row(&self, output: usize) -> &[f64] {
        &self.data[output * PARAM_COUNT..(output + 1) * PARAM_COUNT]
    }

    pub fn get(&self, output: usize, param: usize) -> f64 {
        self.data[output * PARAM_COUNT + param]
    }

    /// Squared Frobenius norm.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

pub fn jacobian(theta: &[f64], xi: &Features) -> Jacobian {
    let mut data = Vec::with_capacity(OUTPUT_DIM * PARAM_COUNT);
    for o in 0..OUTPUT_DIM {
        let mut e = [0.0; OUTPUT_DIM];
        e[o] = 1.0;
        data.extend(vjp(theta, xi, &e));
    }
    Jacobian { data }
}

/// Index of a weight entry `W_layer[row][col]` in the flat vector (layers 0-based).
pub fn weight_index(layer: usize, row: usize, col: usize) -> usize {
    let s = SPANS[layer];
    s.weights + row * s.fan_in + col
}

pub fn bias_index(layer: usize, row: usize) -> usize {
    SPANS[layer].bias + row
}

/// Kink distance: smallest `|pre-activation|` over all hidden units.
pub fn min_kink_distance(theta: &[f64], xi: &Features) -> f64 {
    let (_, tr) = trace(theta, xi);
    tr.pre
        .iter()
        .flatten()
        .fold(f64::INFINITY, |m, z| m.min(z.abs()))
}

/// `(v_now - v_prev) / dt - vdot_nom`.
pub fn residual_eps_acc(v_now: &[f64; 3], v_prev: &[f64; 3], dt: f64, vdot_nom: &[f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| (v_now[i] - v_prev[i]) / dt - vdot_nom[i])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Learning gain.
    pub gamma: f64,
    /// Pull toward the prior.
    pub lambda: f64,
    /// Euler step for the continuous update law, seconds.
    pub dt: f64,
    pub norm_bound: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            gamma: 5.0,
            lambda: 0.1,
            dt: 0.01,
            norm_bound: THETA_NORM_BOUND,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.lambda >= 0.0 && self.dt > 0.0 && self.norm_bound > 0.0) {
            return Err(Error::config(
                "adaptation needs gamma > 0, lambda >= 0, dt > 0 and a positive norm bound",
            ));
        }
        Ok(())
    }
}

/// Online-adapted parameters together with their prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveModel {
    pub theta: Vec<f64>,
    pub prior: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    architecture: Vec<usize>,
    theta: Vec<f64>,
    prior: Vec<f64>,
}

impl AdaptiveModel {
    pub fn zeros() -> Self {
        AdaptiveModel {
            theta: vec![0.0; PARAM_COUNT],
            prior: vec![0.0; PARAM_COUNT],
        }
    }

    /// Gaussian weights with standard deviation `scale / sqrt(fan_in)`, zero
    /// biases; the prior equals the initial parameters.
    pub fn random(seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; PARAM_COUNT];
        for s in SPANS {
            let normal = Normal::new(0.0, scale / (s.fan_in as f64).sqrt()).expect("finite std");
            for w in &mut theta[s.weights..s.bias] {
                *w = normal.sample(&mut rng);
            }
        }
        project_norm(&mut theta, THETA_NORM_BOUND);
        AdaptiveModel {
            prior: theta.clone(),
            theta,
        }
    }

    pub fn from_prior(prior: Vec<f64>) -> Result<Self> {
        if prior.len() != PARAM_COUNT {
            return Err(Error::DataIntegrity(format!(
                "expected {PARAM_COUNT} parameters, got {}",
                prior.len()
            )));
        }
        Ok(AdaptiveModel {
            theta: prior.clone(),
            prior,
        })
    }

    pub fn reset(&mut self) {
        self.theta.copy_from_slice(&self.prior);
    }

    pub fn predict(&self, xi: &Features) -> Output {
        forward(&self.theta, xi)
    }

    pub fn theta_norm(&self) -> f64 {
        norm(&self.theta)
    }

    /// One explicit-Euler step of `theta' = gamma J^T eps - lambda (theta - theta_0)`
    /// followed by projection onto the norm ball.
    pub fn adapt_step(&mut self, xi: &Features, eps_acc: &Output, cfg: &AdaptConfig) -> Result<()> {
        if eps_acc.iter().any(|v| !v.is_finite()) {
            return Err(Error::DataIntegrity("non-finite acceleration residual".into()));
        }
        let grad = vjp(&self.theta, xi, eps_acc);
        for ((th, g), p) in self.theta.iter_mut().zip(&grad).zip(&self.prior) {
            *th += cfg.dt * (cfg.gamma * g - cfg.lambda * (*th - p));
        }
        project_norm(&mut self.theta, cfg.norm_bound);
        Ok(())
    }

    pub fn snapshot(&self) -> MlpSnapshot {
        MlpSnapshot::new(&self.theta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cp = Checkpoint {
            architecture: LAYER_SIZES.to_vec(),
            theta: self.theta.clone(),
            prior: self.prior.clone(),
        };
        let text = serde_json::to_string(&cp)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cp: Checkpoint = serde_json::from_str(&text)?;
        if cp.architecture != LAYER_SIZES {
            return Err(Error::DataIntegrity(format!(
                "checkpoint architecture {:?} does not match {:?}",
                cp.architecture, LAYER_SIZES
            )));
        }
        if cp.theta.len() != PARAM_COUNT || cp.prior.len() != PARAM_COUNT {
            return Err(Error::DataIntegrity("checkpoint parameter count mismatch".into()));
        }
        Ok(AdaptiveModel {
            theta: cp.theta,
            prior: cp.prior,
        })
    }

    /// Refits the output layer of the prior by ridge-regularized least squares
    /// on `(features, target residual acceleration)` pairs, keeping the hidden
    /// layers fixed. Resets `theta` to the new prior.
    pub fn pretrain_output_layer(&mut self, data: &[(Features, Output)], ridge: f64) -> Result<()> {
        if data.is_empty() {
            return Err(Error::DataIntegrity("no pretraining samples".into()));
        }
        let last = SPANS[LAYERS - 1];
        let width = last.fan_in + 1;
        let mut features = DMatrix::<f64>::zeros(data.len(), width);
        let mut targets = DMatrix::<f64>::zeros(data.len(), OUTPUT_DIM);
        for (r, (xi, y)) in data.iter().enumerate() {
            let (_, tr) = trace(&self.prior, xi);
            let hidden = tr.act.last().expect("hidden layers");
            for (c, h) in hidden.iter().enumerate() {
                features[(r, c)] = *h;
            }
            features[(r, last.fan_in)] = 1.0;
            for o in 0..OUTPUT_DIM {
                targets[(r, o)] = y[o];
            }
        }
        let gram = features.transpose() * &features + DMatrix::identity(width, width) * ridge;
        let rhs = features.transpose() * targets;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::DataIntegrity("pretraining normal equations are singular".into()))?;
        let solution = chol.solve(&rhs);
        for o in 0..OUTPUT_DIM {
            for c in 0..last.fan_in {
                self.prior[last.weights + o * last.fan_in + c] = solution[(c, o)];
            }
            self.prior[last.bias + o] = solution[(last.fan_in, o)];
        }
        project_norm(&mut self.prior, THETA_NORM_BOUND);
        self.reset();
        Ok(())
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `theta` onto the ball of radius `bound` when it lies outside.
pub fn project_norm(theta: &mut [f64], bound: f64) {
    let n = norm(theta);
    if n > bound {
        let s = bound / n;
        theta.iter_mut().for_each(|v| *v *= s);
    }
}

/// Largest observed `|F(a) - F(b)| / |a - b|` over the given feature pairs.
pub fn empirical_lipschitz(theta: &[f64], points: &[Features]) -> f64 {
    let outputs: Vec<Output> = points.iter().map(|p| forward(theta, p)).collect();
    let mut best: f64 = 0.0;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let dx = (0..INPUT_DIM)
                .map(|k| (points[i][k] - points[j][k]).powi(2))
                .sum::<f64>()
                .sqrt();
            if dx < 1e-9 {
                continue;
            }
            let dy = (0..OUTPUT_DIM)
                .map(|k| (outputs[i][k] - outputs[j][k]).powi(2))
                .sum::<f64>()
                .sqrt();
            best = best.max(dy / dx);
        }
    }
    best
}

/// Read-only copy of the network laid out for fast repeated evaluation
/// (weights stored column-major so each layer is a sequence of axpy updates).
#[derive(Debug, Clone)]
pub struct MlpSnapshot {
    columns: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl MlpSnapshot {
    pub fn new(theta: &[f64]) -> Self {
        let mut columns = Vec::with_capacity(LAYERS);
        let mut biases = Vec::with_capacity(LAYERS);
        for s in SPANS {
            let mut t = vec![0.0; s.fan_in * s.fan_out];
            for o in 0..s.fan_out {
                for i in 0..s.fan_in {
                    t[i * s.fan_out + o] = theta[s.weights + o * s.fan_in + i];
                }
            }
            columns.push(t);
            biases.push(theta[s.bias..s.bias + s.fan_out].to_vec());
        }
        MlpSnapshot { columns, biases }
    }

    pub fn forward(&self, xi: &Features) -> Output {
        let mut a = [0.0; 64];
        let mut b = [0.0; 64];
        a[..INPUT_DIM].copy_from_slice(xi);
        let mut width = INPUT_DIM;
        for (l, s) in SPANS.iter().enumerate() {
            let out = &mut b[..s.fan_out];
            out.copy_from_slice(&self.biases[l]);
            let cols = &self.columns[l];
            for i in 0..width {
                let x = a[i];
                if x == 0.0 {
                    continue;
                }
                for (o, w) in out.iter_mut().zip(&cols[i * s.fan_out..(i + 1) * s.fan_out]) {
                    *o += w * x;
                }
            }
            if l + 1 < LAYERS {
                for v in out.iter_mut() {
                    *v = relu(*v);
                }
            }
            width = s.fan_out;
            std::mem::swap(&mut a, &mut b);
        }
        [a[0], a[1], a[2]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_features(rng: &mut ChaCha8Rng) -> Features {
        std::array::from_fn(|_| rng.random_range(-3.0..3.0))
    }

    #[test]
    fn parameter_count() {
        assert_eq!(PARAM_COUNT, 5553);
        assert_eq!(SPANS[3].bias + 3, PARAM_COUNT);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let theta = vec![0.0; PARAM_COUNT];
        assert_eq!(forward(&theta, &[1.0, -2.0, 3.0, 0.1, 0.2]), [0.0; 3]);
    }

    #[test]
    fn bias_only_output() {
        let mut model = AdaptiveModel::random(1, 1.0);
        let s = SPANS[3];
        model.theta[s.weights..s.bias].iter_mut().for_each(|w| *w = 0.0);
        model.theta[s.bias..].copy_from_slice(&[0.5, -1.0, 2.0]);
        let y = model.predict(&[4.0, 1.0, -1.0, 0.3, 0.0]);
        assert_eq!(y, [0.5, -1.0, 2.0]);
    }

    #[test]
    fn output_layer_jacobian_entries() {
        let model = AdaptiveModel::random(2, 3.0);
        let xi = [1.0, 0.5, -0.2, 0.1, -0.1];
        let j = jacobian(&model.theta, &xi);
        let (_, tr) = trace(&model.theta, &xi);
        let h3 = tr.act.last().unwrap();
        for o in 0..3 {
            for r in 0..3 {
                assert_eq!(j.get(o, bias_index(3, r)), if o == r { 1.0 } else { 0.0 });
            }
            for k in 0..50 {
                assert_eq!(j.get(o, weight_index(3, o, k)), h3[k]);
                assert_eq!(j.get((o + 1) % 3, weight_index(3, o, k)), 0.0);
            }
        }
    }

    #[test]
    fn snapshot_matches_reference_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = AdaptiveModel::random(5, 2.0);
        let snap = model.snapshot();
        for _ in 0..50 {
            let xi = random_features(&mut rng);
            let a = forward(&model.theta, &xi);
            let b = snap.forward(&xi);
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 1e-12 * (1.0 + a[k].abs()));
            }
        }
    }

    #[test]
    fn vjp_matches_jacobian_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = AdaptiveModel::random(6, 2.0);
        let xi = random_features(&mut rng);
        let g = [0.3, -1.2, 0.7];
        let direct = vjp(&model.theta, &xi, &g);
        let j = jacobian(&model.theta, &xi);
        for p in (0..PARAM_COUNT).step_by(37) {
            let expect: f64 = (0..3).map(|o| j.get(o, p) * g[o]).sum();
            assert!((direct[p] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_is_a_fixed_point() {
        let mut model = AdaptiveModel::random(3, 1.0);
        let before = model.theta.clone();
        model
            .adapt_step(&[1.0, 0.0, 0.0, 0.0, 0.0], &[0.0; 3], &AdaptConfig::default())
            .unwrap();
        assert_eq!(model.theta, before);
    }

    #[test]
    fn regularization_decays_toward_prior() {
        let mut model = AdaptiveModel::random(3, 0.5);
        let offset: Vec<f64> = (0..PARAM_COUNT).map(|i| ((i % 11) as f64 - 5.0) * 1e-3).collect();
        for (t, o) in model.theta.iter_mut().zip(&offset) {
            *t += o;
        }
        let cfg = AdaptConfig {
            gamma: 123.0,
            ..AdaptConfig::default()
        };
        model.adapt_step(&[0.5; 5], &[0.0; 3], &cfg).unwrap();
        let factor = 1.0 - cfg.lambda * cfg.dt;
        for i in 0..PARAM_COUNT {
            let got = model.theta[i] - model.prior[i];
            assert!((got - factor * offset[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn projection_holds_under_huge_residuals() {
        let mut model = AdaptiveModel::random(4, 1.0);
        let cfg = AdaptConfig::default();
        for s in 0..20 {
            let sign = if s % 2 == 0 { 1.0 } else { -1.0 };
            model
                .adapt_step(&[2.0, -1.0, 0.5, 0.1, 0.2], &[sign * 1e6, 1e6, -1e6], &cfg)
                .unwrap();
            assert!(model.theta_norm() <= THETA_NORM_BOUND * (1.0 + 1e-12));
        }
        assert!(model
            .adapt_step(&[0.0; 5], &[f64::NAN, 0.0, 0.0], &cfg)
            .is_err());
    }

    #[test]
    fn eps_acc_examples() {
        let dt = 0.01;
        let vdot = [1.0, -2.0, 0.5];
        let v_prev = [0.3, 0.2, 0.1];
        let v_now: [f64; 3] = std::array::from_fn(|i| v_prev[i] + dt * vdot[i]);
        let e = residual_eps_acc(&v_now, &v_prev, dt, &vdot);
        assert!(e.iter().all(|v| v.abs() < 1e-12));
        let e = residual_eps_acc(&[dt, 0.0, 0.0], &[0.0; 3], dt, &[0.0; 3]);
        assert_eq!(e, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut model = AdaptiveModel::random(8, 1.0);
        model.theta[7] += 0.25;
        model.save(&path).unwrap();
        assert_eq!(AdaptiveModel::load(&path).unwrap(), model);
        std::fs::write(&path, r#"{"architecture":[5,10,3],"theta":[],"prior":[]}"#).unwrap();
        assert!(matches!(AdaptiveModel::load(&path), Err(Error::DataIntegrity(_))));
    }

    #[test]
    fn pretraining_fits_affine_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut model = AdaptiveModel::random(13, 1.0);
        let data: Vec<(Features, Output)> = (0..400)
            .map(|_| {
                let xi = random_features(&mut rng);
                (xi, [0.2, -0.1, 0.05])
            })
            .collect();
        model.pretrain_output_layer(&data, 1e-6).unwrap();
        assert_eq!(model.theta, model.prior);
        let y = model.predict(&data[0].0);
        assert!((y[0] - 0.2).abs() < 1e-3 && (y[1] + 0.1).abs() < 1e-3);
    }
}
