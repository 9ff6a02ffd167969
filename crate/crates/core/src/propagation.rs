//! IMU-driven propagation of the nominal state and the error-state covariance.

use nalgebra::{DMatrix, SMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{exp_so3, skew, Mat3, Vec3};
use crate::state::{ErrorStateLayout as L, FilterState, NominalState, CORE_DIM};

/// Longer gaps between IMU samples indicate dropped data.
pub const MAX_IMU_DT: f64 = 0.1;
/// Dimension of the stacked process noise `[n_a n_aw n_g n_gw]`.
pub const NOISE_DIM: usize = 12;

pub type CoreMatrix = SMatrix<f64, CORE_DIM, CORE_DIM>;
pub type NoiseInputMatrix = SMatrix<f64, CORE_DIM, NOISE_DIM>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PropagationError {
    #[error("IMU timestamps not increasing ({prev} -> {curr})")]
    NonMonotonicTime { prev: f64, curr: f64 },
    #[error("IMU gap of {0} s exceeds the maximum step")]
    ExcessiveDt(f64),
}

/// Raw IMU reading: specific force (m/s²) and angular rate (rad/s) in the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    pub accel: Vec3,
    pub gyro: Vec3,
}

impl ImuSample {
    pub fn new(timestamp: f64, accel: Vec3, gyro: Vec3) -> Self {
        Self { timestamp, accel, gyro }
    }

    /// Linear interpolation between two samples at time `t`.
    pub fn interpolate(a: &ImuSample, b: &ImuSample, t: f64) -> ImuSample {
        let span = b.timestamp - a.timestamp;
        let w = if span > 0.0 { ((t - a.timestamp) / span).clamp(0.0, 1.0) } else { 1.0 };
        ImuSample {
            timestamp: t,
            accel: a.accel + (b.accel - a.accel) * w,
            gyro: a.gyro + (b.gyro - a.gyro) * w,
        }
    }
}

/// Continuous-time noise densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImuNoiseParams {
    /// Accelerometer white noise, m/s²/√Hz.
    pub sigma_a: f64,
    /// Gyroscope white noise, rad/s/√Hz.
    pub sigma_g: f64,
    /// Accelerometer bias random walk, m/s³/√Hz.
    pub sigma_aw: f64,
    /// Gyroscope bias random walk, rad/s²/√Hz.
    pub sigma_gw: f64,
}

impl Default for ImuNoiseParams {
    fn default() -> Self {
        Self { sigma_a: 0.01, sigma_g: 1e-3, sigma_aw: 1e-3, sigma_gw: 1e-4 }
    }
}

impl ImuNoiseParams {
    pub fn is_valid(&self) -> bool {
        [self.sigma_a, self.sigma_g, self.sigma_aw, self.sigma_gw]
            .iter()
            .all(|s| s.is_finite() && *s > 0.0)
    }
}

/// Midpoint integration of the nominal dynamics from `prev` to `curr`.
pub fn propagate_nominal(
    state: &NominalState,
    prev: &ImuSample,
    curr: &ImuSample,
) -> Result<NominalState, PropagationError> {
    let dt = curr.timestamp - prev.timestamp;
    if !(dt > 0.0) {
        return Err(PropagationError::NonMonotonicTime { prev: prev.timestamp, curr: curr.timestamp });
    }
    if dt > MAX_IMU_DT {
        return Err(PropagationError::ExcessiveDt(dt));
    }
    let accel = 0.5 * (prev.accel + curr.accel) - state.b_a;
    let gyro = 0.5 * (prev.gyro + curr.gyro) - state.b_g;
    let mut next = state.clone();
    let r_mid = state.r_wb * exp_so3(&(gyro * (0.5 * dt)));
    next.r_wb = state.r_wb * exp_so3(&(gyro * dt));
    next.r_wb.renormalize();
    next.v_wb = state.v_wb + (r_mid.rotate(&accel) + state.gravity_w) * dt;
    next.p_wb = state.p_wb + 0.5 * (state.v_wb + next.v_wb) * dt;
    next.timestamp = curr.timestamp;
    Ok(next)
}

/// Continuous-time error dynamics restricted to the IMU-driven blocks.
///
/// The full `F` is zero outside the leading `CORE_DIM` rows/columns (extrinsics
/// and keyframe clones have no dynamics); `G` only drives those rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorJacobians {
    pub f: CoreMatrix,
    pub g: NoiseInputMatrix,
}

impl ErrorJacobians {
    pub fn dense_f(&self, dim: usize) -> DMatrix<f64> {
        let mut f = DMatrix::zeros(dim, dim);
        f.view_mut((0, 0), (CORE_DIM, CORE_DIM)).copy_from(&self.f);
        f
    }

    pub fn dense_g(&self, dim: usize) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(dim, NOISE_DIM);
        g.view_mut((0, 0), (CORE_DIM, NOISE_DIM)).copy_from(&self.g);
        g
    }
}

/// Linearized error dynamics for the left-perturbed attitude `R = Exp(δθ) R̂`.
pub fn error_jacobians(state: &NominalState, imu: &ImuSample) -> ErrorJacobians {
    let r = *state.r_wb.matrix();
    let accel = imu.accel - state.b_a;
    let mut f = CoreMatrix::zeros();
    let set = |m: &mut CoreMatrix, row: usize, col: usize, blk: &Mat3| {
        m.fixed_view_mut::<3, 3>(row, col).copy_from(blk);
    };
    set(&mut f, L::POSITION, L::VELOCITY, &Mat3::identity());
    set(&mut f, L::VELOCITY, L::ATTITUDE, &(-skew(&(r * accel))));
    set(&mut f, L::VELOCITY, L::ACCEL_BIAS, &(-r));
    set(&mut f, L::ATTITUDE, L::GYRO_BIAS, &(-r));

    let mut g = NoiseInputMatrix::zeros();
    g.fixed_view_mut::<3, 3>(L::VELOCITY, 0).copy_from(&(-r));
    g.fixed_view_mut::<3, 3>(L::ACCEL_BIAS, 3).copy_from(&Mat3::identity());
    g.fixed_view_mut::<3, 3>(L::ATTITUDE, 6).copy_from(&(-r));
    g.fixed_view_mut::<3, 3>(L::GYRO_BIAS, 9).copy_from(&Mat3::identity());
    ErrorJacobians { f, g }
}

/// Second-order transition matrix `I + F dt + (F dt)²/2` of the core block.
pub fn transition_matrix(jac: &ErrorJacobians, dt: f64) -> CoreMatrix {
    let fdt = jac.f * dt;
    CoreMatrix::identity() + fdt + 0.5 * fdt * fdt
}

/// `P' = Φ P Φᵀ + G Q_c Gᵀ dt`, exploiting that `Φ` is the identity outside the core block.
pub fn propagate_covariance(
    cov: &DMatrix<f64>,
    jac: &ErrorJacobians,
    noise: &ImuNoiseParams,
    dt: f64,
) -> DMatrix<f64> {
    let n = cov.nrows();
    let phi = transition_matrix(jac, dt);
    let mut q_c = SMatrix::<f64, NOISE_DIM, NOISE_DIM>::zeros();
    for (i, s) in [noise.sigma_a, noise.sigma_aw, noise.sigma_g, noise.sigma_gw].iter().enumerate() {
        for k in 0..3 {
            q_c[(3 * i + k, 3 * i + k)] = s * s;
        }
    }
    let q_d = jac.g * q_c * jac.g.transpose() * dt;

    let mut out = cov.clone();
    let p_cc: CoreMatrix = cov.fixed_view::<CORE_DIM, CORE_DIM>(0, 0).into_owned();
    let mut new_cc = phi * p_cc * phi.transpose() + q_d;
    new_cc = 0.5 * (new_cc + new_cc.transpose());
    out.fixed_view_mut::<CORE_DIM, CORE_DIM>(0, 0).copy_from(&new_cc);
    if n > CORE_DIM {
        let rest = n - CORE_DIM;
        let p_cr = cov.view((0, CORE_DIM), (CORE_DIM, rest));
        let new_cr = phi * p_cr;
        out.view_mut((0, CORE_DIM), (CORE_DIM, rest)).copy_from(&new_cr);
        out.view_mut((CORE_DIM, 0), (rest, CORE_DIM)).copy_from(&new_cr.transpose());
    }
    out
}

/// Propagates nominal state and covariance of `filter` across one IMU interval.
///
/// The Jacobians are evaluated at the interval start with the mean IMU reading.
pub fn propagate_filter(
    filter: &mut FilterState,
    prev: &ImuSample,
    curr: &ImuSample,
    noise: &ImuNoiseParams,
) -> Result<(), PropagationError> {
    let next = propagate_nominal(&filter.nominal, prev, curr)?;
    let mean = ImuSample::new(
        prev.timestamp,
        0.5 * (prev.accel + curr.accel),
        0.5 * (prev.gyro + curr.gyro),
    );
    let jac = error_jacobians(&filter.nominal, &mean);
    filter.covariance = propagate_covariance(&filter.covariance, &jac, noise, curr.timestamp - prev.timestamp);
    filter.nominal = next;
    Ok(())
}
