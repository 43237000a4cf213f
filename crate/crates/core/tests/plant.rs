use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use siocp::plant::{
    rigid_body_derivative, rotation_body_to_world, true_disturbance, wind_velocity, ControlInput, Mat3, Plant,
    PlantState, WindDragConfig,
};

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Roll about world x composed with pitch about y, built from elementary rotations.
fn reference_rotation(roll: f64, pitch: f64) -> Mat3 {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]];
    let ry = [[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]];
    matmul(&rx, &ry)
}

fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

#[test]
fn wind_at_pi_matches_direct_evaluation() {
    let pi = std::f64::consts::PI;
    let w = wind_velocity(&[0.0; 3], pi);
    let expected = [
        2.0 * (pi / 2.0).sin() + (2.0 * pi).sin(),
        2.4 * (0.4 * pi).cos() + 1.2 * (1.8 * pi).cos(),
        (0.3 * pi).sin(),
    ];
    for i in 0..3 {
        assert!((w[i] - expected[i]).abs() < 1e-12);
    }
    let w = wind_velocity(&[1.0, 0.0, 0.0], 0.0);
    for (a, b) in w.iter().zip([0.5, 3.6, 0.0]) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn rotations_are_proper() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let (roll, pitch) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
        let r = rotation_body_to_world(roll, pitch);
        assert!((det(&r) - 1.0).abs() < 1e-12);
        let reference = reference_rotation(roll, pitch);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                assert!((dot - f64::from(u8::from(i == j))).abs() < 1e-12);
                assert!((r[i][j] - reference[i][j]).abs() < 1e-15);
            }
        }
        let col = [r[0][2], r[1][2], r[2][2]];
        let expected = [pitch.sin(), -pitch.cos() * roll.sin(), pitch.cos() * roll.cos()];
        for i in 0..3 {
            assert!((col[i] - expected[i]).abs() < 1e-15);
        }
    }
}

proptest! {
    #[test]
    fn disturbance_matches_an_independent_evaluation(
        state in proptest::array::uniform8(-2.0f64..2.0),
        t in 0.0f64..20.0,
        noise in proptest::array::uniform3(-1.0f64..1.0),
        mass in 0.5f64..3.0,
    ) {
        let cfg = WindDragConfig { mass, ..WindDragConfig::default() };
        let x = PlantState(state);
        let got = true_disturbance(&x, t, &cfg, &noise);

        let r = reference_rotation(state[6], state[7]);
        let wind = wind_velocity(&[state[0], state[1], state[2]], t);
        let rel: Vec<f64> = (0..3).map(|i| state[3 + i] - wind[i]).collect();
        let body: Vec<f64> = (0..3).map(|i| (0..3).map(|k| r[k][i] * rel[k]).sum()).collect();
        let speed = body.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..3 {
            let drag_world: f64 = (0..3).map(|k| r[i][k] * cfg.drag[k] * body[k] * speed).sum();
            let expected = -mass * drag_world + noise[i];
            prop_assert!((got[i] - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        }
    }
}

/// The finite-difference residual of a zero-model nominal tracks the
/// simulator's disturbance to first order in the step.
#[test]
fn finite_difference_residual_recovers_the_disturbance() {
    let mut errors = Vec::new();
    for h in [0.01f64, 0.005, 0.0025] {
        let cfg = WindDragConfig {
            noise_enabled: false,
            ..WindDragConfig::default()
        };
        let mut plant = Plant::new(cfg.clone()).unwrap();
        let mut x = PlantState([0.0, 0.0, 1.0, 1.5, -0.5, 0.2, 0.1, -0.2]);
        let u = ControlInput([0.3, -0.2, 10.5]);
        let mut worst: f64 = 0.0;
        let steps = (0.2 / h).round() as usize;
        for i in 0..steps {
            let t = i as f64 * h;
            let out = plant.step(&x, &u, t, h).unwrap();
            let nominal = rigid_body_derivative(&x, &u, &[0.0; 3], cfg.mass, cfg.gravity);
            for c in 0..3 {
                let eps = (out.state.0[3 + c] - x.0[3 + c]) / h - nominal[3 + c];
                worst = worst.max((eps - out.disturbance_accel[c]).abs());
            }
            x = out.state;
        }
        errors.push(worst);
    }
    assert!(errors[0] < 0.1, "first-order error too large: {errors:?}");
    assert!(errors[1] < 0.6 * errors[0] && errors[2] < 0.6 * errors[1], "{errors:?}");
}
