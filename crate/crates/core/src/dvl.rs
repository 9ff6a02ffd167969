//! Four-beam Doppler velocity log: Doppler physics, Janus beam geometry,
//! least-squares velocity with its covariance, and the filter update.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{skew, Vec3};
use crate::state::{ErrorStateLayout as L, FilterState, NominalState, StateError};

pub const NUM_BEAMS: usize = 4;
/// Radial speeds above this are treated as physically implausible.
pub const MAX_RADIAL_SPEED: f64 = 10.0;
/// χ²(3) 95 % quantile.
pub const CHI2_3_95: f64 = 7.815;

pub type BeamMatrix = SMatrix<f64, NUM_BEAMS, 3>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DvlError {
    #[error("radial velocity {0} m/s is implausible")]
    ImplausibleVelocity(f64),
    #[error("beam directions are coplanar")]
    CoplanarBeams,
    #[error("beam geometry invalid: {0}")]
    InvalidGeometry(String),
    #[error("only {0} valid beams, at least 3 required")]
    InsufficientBeams(usize),
    #[error("valid beams do not span 3-D")]
    RankDeficient,
    #[error("invalid acoustic parameters: carrier {carrier_hz} Hz, sound speed {sound_speed} m/s")]
    InvalidAcoustics { carrier_hz: f64, sound_speed: f64 },
    #[error(transparent)]
    State(#[from] StateError),
}

/// Monostatic Doppler relation `v_r = -c_s Δf / (2 f_t)`; positive towards the seabed.
pub fn doppler_to_radial(delta_f: f64, carrier_hz: f64, sound_speed: f64) -> Result<f64, DvlError> {
    if !(carrier_hz > 0.0) || !sound_speed.is_finite() {
        return Err(DvlError::InvalidAcoustics { carrier_hz, sound_speed });
    }
    let v = -sound_speed * delta_f / (2.0 * carrier_hz);
    if !(v.abs() < MAX_RADIAL_SPEED) {
        return Err(DvlError::ImplausibleVelocity(v));
    }
    Ok(v)
}

/// Inverse of [`doppler_to_radial`].
pub fn radial_to_doppler(v_r: f64, carrier_hz: f64, sound_speed: f64) -> f64 {
    -2.0 * carrier_hz * v_r / sound_speed
}

/// Unit beam directions, one row per beam: `(cos β cos α, sin β cos α, sin α)`.
pub fn beam_directions(tilt: f64, azimuths: &[f64; NUM_BEAMS]) -> Result<BeamMatrix, DvlError> {
    if !(tilt > 0.0 && tilt <= std::f64::consts::FRAC_PI_2) {
        return Err(DvlError::InvalidGeometry(format!("tilt {tilt} rad outside (0, pi/2]")));
    }
    let mut e = BeamMatrix::zeros();
    for (i, b) in azimuths.iter().enumerate() {
        e[(i, 0)] = b.cos() * tilt.cos();
        e[(i, 1)] = b.sin() * tilt.cos();
        e[(i, 2)] = tilt.sin();
    }
    if !full_rank(&(e.transpose() * e)) {
        return Err(DvlError::CoplanarBeams);
    }
    Ok(e)
}

fn full_rank(normal: &Matrix3<f64>) -> bool {
    let eig = normal.symmetric_eigenvalues();
    let max = eig.max();
    max > 0.0 && eig.min() > 1e-10 * max
}

/// Transducer layout with the precomputed pseudo-inverse `A = (EᵀE)⁻¹Eᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamGeometry {
    pub tilt: f64,
    pub azimuths: [f64; NUM_BEAMS],
    pub e: BeamMatrix,
    pub ete_inv: Matrix3<f64>,
    pub a: SMatrix<f64, 3, NUM_BEAMS>,
}

impl BeamGeometry {
    pub fn new(tilt: f64, azimuths: [f64; NUM_BEAMS]) -> Result<Self, DvlError> {
        let e = beam_directions(tilt, &azimuths)?;
        let ete_inv = (e.transpose() * e).try_inverse().ok_or(DvlError::CoplanarBeams)?;
        let a = ete_inv * e.transpose();
        Ok(Self { tilt, azimuths, e, ete_inv, a })
    }

    /// Symmetric Janus layout: 60° tilt, azimuths 45°, 135°, 225°, 315°.
    pub fn janus() -> Self {
        let d = std::f64::consts::PI / 180.0;
        Self::new(60.0 * d, [45.0 * d, 135.0 * d, 225.0 * d, 315.0 * d]).expect("janus layout is valid")
    }

    /// Per-beam radial velocities for a DVL-frame velocity.
    pub fn project(&self, v_d: &Vec3) -> [f64; NUM_BEAMS] {
        let r = self.e * v_d;
        [r[0], r[1], r[2], r[3]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BeamReadings {
    /// Doppler shifts `Δf = f_r - f_t`, Hz.
    Doppler([f64; NUM_BEAMS]),
    /// Radial velocities already converted by the instrument, m/s.
    Radial([f64; NUM_BEAMS]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DvlMeasurement {
    pub timestamp: f64,
    pub readings: BeamReadings,
    pub valid: [bool; NUM_BEAMS],
    pub carrier_hz: f64,
    pub sound_speed: f64,
    /// Per-beam radial noise std, m/s.
    pub beam_sigma: [f64; NUM_BEAMS],
}

impl DvlMeasurement {
    /// Radial velocity per beam, `None` for flagged or implausible beams.
    pub fn radial_velocities(&self) -> Result<[Option<f64>; NUM_BEAMS], DvlError> {
        if !(1400.0..=1600.0).contains(&self.sound_speed) || !(self.carrier_hz > 0.0) {
            return Err(DvlError::InvalidAcoustics { carrier_hz: self.carrier_hz, sound_speed: self.sound_speed });
        }
        let mut out = [None; NUM_BEAMS];
        for i in 0..NUM_BEAMS {
            if !self.valid[i] {
                continue;
            }
            let v = match self.readings {
                BeamReadings::Doppler(df) => doppler_to_radial(df[i], self.carrier_hz, self.sound_speed).ok(),
                BeamReadings::Radial(vr) => Some(vr[i]).filter(|v| v.abs() < MAX_RADIAL_SPEED),
            };
            out[i] = v.filter(|v| v.is_finite());
        }
        Ok(out)
    }
}

/// Least-squares DVL-frame velocity and its covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct DvlVelocity {
    pub v_d: Vec3,
    pub sigma_d: Matrix3<f64>,
    pub valid_beams: usize,
}

/// Weighted least squares over the valid beams. With four equal-variance beams
/// this is `A ṽ` with covariance `σ² (EᵀE)⁻¹`.
pub fn beams_to_velocity(meas: &DvlMeasurement, geom: &BeamGeometry) -> Result<DvlVelocity, DvlError> {
    let radial = meas.radial_velocities()?;
    let valid: Vec<usize> = (0..NUM_BEAMS).filter(|&i| radial[i].is_some()).collect();
    if valid.len() < 3 {
        return Err(DvlError::InsufficientBeams(valid.len()));
    }
    let equal_sigma = meas.beam_sigma.iter().all(|s| *s == meas.beam_sigma[0]);
    if valid.len() == NUM_BEAMS && equal_sigma {
        let v = SMatrix::<f64, NUM_BEAMS, 1>::from_fn(|i, _| radial[i].unwrap());
        let s2 = meas.beam_sigma[0] * meas.beam_sigma[0];
        return Ok(DvlVelocity { v_d: geom.a * v, sigma_d: geom.ete_inv * s2, valid_beams: NUM_BEAMS });
    }
    let mut normal = Matrix3::zeros();
    let mut rhs = Vec3::zeros();
    for &i in &valid {
        let e_i: Vec3 = geom.e.row(i).transpose();
        let w = 1.0 / (meas.beam_sigma[i] * meas.beam_sigma[i]);
        normal += w * e_i * e_i.transpose();
        rhs += w * e_i * radial[i].unwrap();
    }
    if !full_rank(&normal) {
        return Err(DvlError::RankDeficient);
    }
    let sigma_d = normal.try_inverse().ok_or(DvlError::RankDeficient)?;
    Ok(DvlVelocity { v_d: sigma_d * rhs, sigma_d, valid_beams: valid.len() })
}

/// Expected DVL-frame velocity `R_bDᵀ (R_wbᵀ v + ω̂ × p_bD)` with `ω̂ = ω̃ - b_g`.
pub fn predict_dvl_velocity(state: &NominalState, gyro_raw: &Vec3) -> Vec3 {
    let omega = gyro_raw - state.b_g;
    let v_body = state.r_wb.matrix().transpose() * state.v_wb + omega.cross(&state.t_bd.translation);
    state.t_bd.rotation.matrix().transpose() * v_body
}

/// Residual `ṽ_D - v̂_D` and `H = ∂v̂_D/∂δx`. Extrinsic columns are left at zero
/// when `estimate_extrinsics` is false.
pub fn dvl_residual_and_jacobian(
    filter: &FilterState,
    measured: &Vec3,
    gyro_raw: &Vec3,
    estimate_extrinsics: bool,
) -> (Vec3, DMatrix<f64>) {
    let s = &filter.nominal;
    let r_wb_t = s.r_wb.matrix().transpose();
    let r_bd_t = s.t_bd.rotation.matrix().transpose();
    let omega = gyro_raw - s.b_g;
    let lever = s.t_bd.translation;
    let v_body = r_wb_t * s.v_wb + omega.cross(&lever);

    let mut h = DMatrix::zeros(3, filter.dim());
    let mut put = |col: usize, blk: Matrix3<f64>| h.fixed_view_mut::<3, 3>(0, col).copy_from(&blk);
    put(L::VELOCITY, r_bd_t * r_wb_t);
    put(L::ATTITUDE, r_bd_t * r_wb_t * skew(&s.v_wb));
    put(L::GYRO_BIAS, r_bd_t * skew(&lever));
    if estimate_extrinsics {
        put(L::DVL_TRANSLATION, r_bd_t * skew(&omega));
        put(L::DVL_ROTATION, r_bd_t * skew(&v_body));
    }
    (measured - r_bd_t * v_body, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DvlUpdateOptions {
    pub estimate_extrinsics: bool,
    /// Reject pings whose squared Mahalanobis distance exceeds [`CHI2_3_95`].
    pub gate: bool,
}

impl Default for DvlUpdateOptions {
    fn default() -> Self {
        Self { estimate_extrinsics: true, gate: true }
    }
}

fn mahalanobis(s: &Matrix3<f64>, r: &Vec3) -> f64 {
    s.cholesky().map(|c| r.dot(&c.solve(r))).unwrap_or(f64::INFINITY)
}

/// Linearized ping, ready to be weighted and applied.
#[derive(Debug, Clone)]
pub struct PreparedDvl {
    pub residual: Vec3,
    pub h: DMatrix<f64>,
    pub velocity: DvlVelocity,
    /// Squared Mahalanobis distance with the unscaled covariance.
    pub mahalanobis: f64,
    /// Trace of the innovation covariance `H P Hᵀ + Σ_D`.
    pub innovation_trace: f64,
    pub gate_passed: bool,
    hph: Matrix3<f64>,
    gate: bool,
}

/// What the DVL update saw; feeds the reliability score.
#[derive(Debug, Clone, PartialEq)]
pub struct DvlReport {
    pub timestamp: f64,
    pub valid_beams: usize,
    pub residual_norm: f64,
    pub sigma_trace: f64,
    /// Trace of `H P Hᵀ + Σ_D`.
    pub innovation_trace: f64,
    pub mahalanobis: f64,
    pub gate_passed: bool,
    pub applied: bool,
}

impl PreparedDvl {
    pub fn new(
        filter: &FilterState,
        meas: &DvlMeasurement,
        geom: &BeamGeometry,
        gyro_raw: &Vec3,
        options: &DvlUpdateOptions,
    ) -> Result<Self, DvlError> {
        let velocity = beams_to_velocity(meas, geom)?;
        let (residual, h) = dvl_residual_and_jacobian(filter, &velocity.v_d, gyro_raw, options.estimate_extrinsics);
        let hph_d = &h * &filter.covariance * h.transpose();
        let hph = Matrix3::from_iterator(hph_d.iter().copied());
        let s = hph + velocity.sigma_d;
        let mahalanobis = mahalanobis(&s, &residual);
        let gate_passed = !options.gate || mahalanobis <= CHI2_3_95;
        Ok(Self { residual, h, velocity, mahalanobis, innovation_trace: s.trace(), gate_passed, hph, gate: options.gate })
    }

    /// Gate decision when the ping is weighted with `scale · Σ_D`.
    pub fn passes_gate(&self, scale: f64) -> bool {
        !self.gate || mahalanobis(&(self.hph + self.velocity.sigma_d * scale), &self.residual) <= CHI2_3_95
    }

    pub fn report(&self, timestamp: f64, applied: bool) -> DvlReport {
        DvlReport {
            timestamp,
            valid_beams: self.velocity.valid_beams,
            residual_norm: self.residual.norm(),
            sigma_trace: self.velocity.sigma_d.trace(),
            innovation_trace: self.innovation_trace,
            mahalanobis: self.mahalanobis,
            gate_passed: self.gate_passed,
            applied,
        }
    }

    /// EKF update with covariance `scale · Σ_D`.
    pub fn apply(&self, filter: &mut FilterState, scale: f64) -> Result<(), DvlError> {
        let r = DVector::from_column_slice(self.residual.as_slice());
        let cov = DMatrix::from_column_slice(3, 3, (self.velocity.sigma_d * scale).as_slice());
        filter.ekf_update(&self.h, &r, &cov)?;
        Ok(())
    }
}

/// Gated DVL update: pings failing the gate at the applied noise scale are
/// reported but leave the filter untouched.
pub fn dvl_update(
    filter: &mut FilterState,
    meas: &DvlMeasurement,
    geom: &BeamGeometry,
    gyro_raw: &Vec3,
    aware_scale: f64,
    options: &DvlUpdateOptions,
) -> Result<DvlReport, DvlError> {
    let prepared = PreparedDvl::new(filter, meas, geom, gyro_raw, options)?;
    if !prepared.passes_gate(aware_scale) {
        return Ok(prepared.report(meas.timestamp, false));
    }
    prepared.apply(filter, aware_scale)?;
    Ok(prepared.report(meas.timestamp, true))
}
