//! Propagation checked against independent references: the exact nonlinear
//! error dynamics and the matrix exponential of `F dt`.

mod common;

use avio::geometry::{exp_so3, log_so3, Vec3};
use avio::propagation::{
    error_jacobians, propagate_covariance, transition_matrix, ImuNoiseParams, ImuSample,
};
use avio::state::{NominalState, CORE_DIM};
use common::{error_dynamics, rand_vec, random_nominal, random_spd, rel_err};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn f_matches_exact_error_dynamics() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let nominal = random_nominal(&mut rng);
        let imu = ImuSample::new(0.0, rand_vec(&mut rng, 3.0) + Vec3::new(0.0, 0.0, -9.8), rand_vec(&mut rng, 0.5));
        let eps = 1e-6;
        let mut f_fd = DMatrix::zeros(CORE_DIM, CORE_DIM);
        for j in 0..CORE_DIM {
            let mut plus = DVector::zeros(CORE_DIM);
            plus[j] = eps;
            let col = (error_dynamics(&nominal, &imu, &plus) - error_dynamics(&nominal, &imu, &-plus)) / (2.0 * eps);
            f_fd.set_column(j, &col);
        }
        let f = error_jacobians(&nominal, &imu).dense_f(CORE_DIM);
        assert!(rel_err(&f, &f_fd) < 1e-5, "relative error {}", rel_err(&f, &f_fd));
    }
}

#[test]
fn error_dynamics_reference_is_zero_at_origin() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let nominal = random_nominal(&mut rng);
    let imu = ImuSample::new(0.0, rand_vec(&mut rng, 3.0), rand_vec(&mut rng, 0.5));
    assert!(error_dynamics(&nominal, &imu, &DVector::zeros(CORE_DIM)).amax() < 1e-15);
}

#[test]
fn second_order_transition_matches_matrix_exponential() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let nominal = random_nominal(&mut rng);
        let imu = ImuSample::new(0.0, rand_vec(&mut rng, 2.0) + Vec3::new(0.0, 0.0, -9.8), rand_vec(&mut rng, 0.5));
        let jac = error_jacobians(&nominal, &imu);
        let dt = 0.005;
        let exact = (jac.dense_f(CORE_DIM) * dt).exp();
        let phi = DMatrix::from_column_slice(CORE_DIM, CORE_DIM, transition_matrix(&jac, dt).as_slice());
        assert!(rel_err(&phi, &exact) < 1e-6, "relative error {}", rel_err(&phi, &exact));
    }
}

#[test]
fn structured_propagation_matches_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let nominal = random_nominal(&mut rng);
    let imu = ImuSample::new(0.0, rand_vec(&mut rng, 2.0), rand_vec(&mut rng, 0.3));
    let jac = error_jacobians(&nominal, &imu);
    let noise = ImuNoiseParams::default();
    let dt = 0.005;
    for n in [CORE_DIM, 27, 27 + 6 * 4] {
        let p = random_spd(&mut rng, n, 0.2);
        let core = transition_matrix(&jac, dt);
        let mut phi = DMatrix::identity(n, n);
        phi.view_mut((0, 0), (CORE_DIM, CORE_DIM)).copy_from(&core);
        let g = jac.dense_g(n);
        let s = |v: f64| v * v;
        let qc = DMatrix::from_diagonal(&DVector::from_fn(12, |i, _| match i / 3 {
            0 => s(noise.sigma_a),
            1 => s(noise.sigma_aw),
            2 => s(noise.sigma_g),
            _ => s(noise.sigma_gw),
        }));
        let dense = &phi * &p * phi.transpose() + &g * qc * g.transpose() * dt;
        let structured = propagate_covariance(&p, &jac, &noise, dt);
        assert!(rel_err(&structured, &dense) < 1e-12);
    }
}

#[test]
fn constant_rate_rotation_is_exact_over_many_steps() {
    // A reference path integrated in one shot equals the chained midpoint steps
    let omega = Vec3::new(0.1, -0.2, 0.3);
    let mut s = NominalState::default();
    let rate = 200.0;
    let n = 1000;
    for k in 0..n {
        let a = ImuSample::new(k as f64 / rate, Vec3::zeros(), omega);
        let b = ImuSample::new((k + 1) as f64 / rate, Vec3::zeros(), omega);
        s = avio::propagation::propagate_nominal(&s, &a, &b).unwrap();
    }
    let expected = exp_so3(&(omega * (n as f64 / rate)));
    assert!(log_so3(&(expected.transpose() * s.r_wb)).unwrap().norm() < 1e-9);
}
