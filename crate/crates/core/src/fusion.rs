//! The estimator: a timestamp-ordered event loop that propagates on IMU
//! samples and runs DVL and visual updates through the reliability gate.
//!
//! Measurements are buffered until an IMU sample at or after their timestamp
//! arrives; the straddling IMU interval is split by linear interpolation so the
//! state is propagated exactly to each measurement time. On equal timestamps
//! IMU comes first, then DVL, then camera.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::time::Instant;

use nalgebra::{DMatrix, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aware::{quality_from_visual, quality_score_dvl, AwareParams, Decision, SensorHealth, SensorId};
use crate::dvl::{BeamGeometry, DvlMeasurement, DvlReport, DvlUpdateOptions, PreparedDvl, NUM_BEAMS};
use crate::geometry::{left_minus, Rotation, Transform, Vec3};
use crate::propagation::{propagate_filter, ImuNoiseParams, ImuSample, PropagationError};
use crate::sim::{forward_camera_rotation, GroundTruth, WorldModel};
use crate::state::{Block, ErrorStateLayout as L, FilterState, NominalState, BASE_DIM};
use crate::vision::{CameraFrame, CameraModel, FeatureTrack, PreparedVisual, VisualReport, VisualUpdateOptions};

/// Out-of-order measurements within this many seconds are accepted.
pub const REORDER_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("start is not static (gyro norm {0:.3} rad/s) and no DVL ping is available")]
    DynamicStart(f64),
    #[error("event at t = {t} arrived after the filter reached t = {current}")]
    NonMonotonicEvent { t: f64, current: f64 },
    #[error("filter diverged at t = {t}: {reason}")]
    Divergence { t: f64, reason: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Propagation(#[from] PropagationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Gravity alignment from the first `static_duration` seconds of IMU data.
    Static,
    /// Start from a supplied state (simulation studies).
    Groundtruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub mode: InitMode,
    pub static_duration: f64,
    /// Largest mean gyro norm accepted as static, rad/s.
    pub static_gyro_threshold: f64,
    pub position_std: f64,
    pub velocity_std: f64,
    pub roll_pitch_std_deg: f64,
    pub yaw_std_deg: f64,
    pub accel_bias_std: f64,
    pub gyro_bias_std: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            mode: InitMode::Static,
            static_duration: 1.0,
            static_gyro_threshold: 0.05,
            position_std: 1e-3,
            velocity_std: 0.05,
            roll_pitch_std_deg: 1.0,
            yaw_std_deg: 1.0,
            accel_bias_std: 0.05,
            gyro_bias_std: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtrinsicConfig {
    /// Initial guess: rotation (ZYX roll, pitch, yaw, rad) and translation (m).
    pub rotation_rpy: [f64; 3],
    pub translation: [f64; 3],
    pub rotation_std_deg: f64,
    pub translation_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AwareConfig {
    pub enabled: bool,
    pub vis: AwareParams,
    pub dvl: AwareParams,
}

impl Default for AwareConfig {
    fn default() -> Self {
        Self { enabled: true, vis: AwareParams::default(), dvl: AwareParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub use_visual: bool,
    pub use_dvl: bool,
    pub max_clones: usize,
    pub imu_noise: ImuNoiseParams,
    /// Pixel noise std assumed by the visual update, px.
    pub u_px: f64,
    pub camera: CameraModel,
    pub beam_tilt: f64,
    pub beam_azimuths: [f64; NUM_BEAMS],
    /// Lower bound on the per-beam noise std used in `Σ_D`, m/s.
    pub min_beam_sigma: f64,
    /// IMU samples averaged into the body rate used by the DVL lever-arm term.
    pub dvl_gyro_window: usize,
    pub gate_visual: bool,
    pub gate_dvl: bool,
    pub estimate_dvl_extrinsics: bool,
    pub estimate_camera_extrinsics: bool,
    /// DVL-to-body initial guess.
    pub dvl_extrinsics: ExtrinsicConfig,
    /// Camera-to-body initial guess; the rotation is applied on top of the
    /// forward-looking mounting.
    pub camera_extrinsics: ExtrinsicConfig,
    /// New keyframe when the mean pixel motion since the last one exceeds this, px.
    pub keyframe_parallax_px: f64,
    /// New keyframe when fewer than this fraction of the last keyframe's features remain.
    pub keyframe_track_ratio: f64,
    /// Frames with fewer features carry no usable visual information.
    pub min_frame_features: usize,
    /// Keyframe observations a track needs before it is used.
    pub min_track_length: usize,
    /// Tracks used per visual update.
    pub max_tracks_per_update: usize,
    /// Frame feature count that earns a full count term in the visual quality score.
    pub visual_target_features: usize,
    pub init: InitConfig,
    pub aware: AwareConfig,
}

impl Default for FilterConfig {
    fn default() -> Self {
        let janus = BeamGeometry::janus();
        Self {
            use_visual: true,
            use_dvl: true,
            max_clones: 10,
            imu_noise: ImuNoiseParams::default(),
            u_px: 1.0,
            camera: CameraModel::default(),
            beam_tilt: janus.tilt,
            beam_azimuths: janus.azimuths,
            min_beam_sigma: 1e-3,
            dvl_gyro_window: 5,
            gate_visual: true,
            gate_dvl: true,
            estimate_dvl_extrinsics: true,
            estimate_camera_extrinsics: false,
            dvl_extrinsics: ExtrinsicConfig {
                rotation_rpy: [0.0; 3],
                translation: [0.0; 3],
                rotation_std_deg: 10.0,
                translation_std: 0.2,
            },
            camera_extrinsics: ExtrinsicConfig {
                rotation_rpy: [0.0; 3],
                translation: [0.2, 0.0, 0.1],
                rotation_std_deg: 1.0,
                translation_std: 0.02,
            },
            keyframe_parallax_px: 15.0,
            keyframe_track_ratio: 0.7,
            min_frame_features: 8,
            min_track_length: 3,
            max_tracks_per_update: 60,
            visual_target_features: 30,
            init: InitConfig::default(),
            aware: AwareConfig::default(),
        }
    }
}

impl Default for ExtrinsicConfig {
    fn default() -> Self {
        Self { rotation_rpy: [0.0; 3], translation: [0.0; 3], rotation_std_deg: 10.0, translation_std: 0.2 }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let bad = |m: &str| Err(EstimatorError::InvalidConfig(m.to_string()));
        if self.max_clones < 2 {
            return bad("max_clones must be at least 2");
        }
        if !self.imu_noise.is_valid() {
            return bad("imu_noise: standard deviations must be non-negative and finite");
        }
        if !(self.u_px > 0.0) {
            return bad("u_px must be positive");
        }
        if !self.camera.is_valid() {
            return bad("camera: invalid intrinsics");
        }
        if BeamGeometry::new(self.beam_tilt, self.beam_azimuths).is_err() {
            return bad("beam_azimuths: degenerate beam geometry");
        }
        if !self.aware.vis.is_valid() || !self.aware.dvl.is_valid() {
            return bad("aware: need 0 <= tau <= tau_rec <= 1, gamma > 1, queue_len >= 1, window_s > 0");
        }
        if self.min_track_length < 2 {
            return bad("min_track_length must be at least 2");
        }
        if !(self.init.static_duration > 0.0) {
            return bad("init.static_duration must be positive");
        }
        Ok(())
    }

    pub fn initial_t_bd(&self) -> Transform {
        let [r, p, y] = self.dvl_extrinsics.rotation_rpy;
        Transform::new(Rotation::from_euler_zyx(r, p, y), Vec3::from(self.dvl_extrinsics.translation))
    }

    pub fn initial_t_bc(&self) -> Transform {
        let [r, p, y] = self.camera_extrinsics.rotation_rpy;
        Transform::new(
            Rotation::from_euler_zyx(r, p, y) * forward_camera_rotation(),
            Vec3::from(self.camera_extrinsics.translation),
        )
    }

    /// Takes sensor intrinsics from a world description. With `true_extrinsics`
    /// the initial extrinsic guesses are set to the world's true values.
    pub fn adapt_to_world(&mut self, world: &WorldModel, true_extrinsics: bool) {
        self.camera = world.camera;
        self.beam_tilt = world.beam_tilt;
        self.beam_azimuths = world.beam_azimuths;
        if true_extrinsics {
            self.set_extrinsics(&world.t_bc(), &world.t_bd());
        }
    }

    pub fn set_extrinsics(&mut self, t_bc: &Transform, t_bd: &Transform) {
        let mount = t_bc.rotation * forward_camera_rotation().transpose();
        let (r, p, y) = mount.euler_zyx();
        self.camera_extrinsics.rotation_rpy = [r, p, y];
        self.camera_extrinsics.translation = t_bc.translation.into();
        let (r, p, y) = t_bd.rotation.euler_zyx();
        self.dvl_extrinsics.rotation_rpy = [r, p, y];
        self.dvl_extrinsics.translation = t_bd.translation.into();
    }

    fn initial_covariance(&self) -> DMatrix<f64> {
        let i = &self.init;
        let d = |deg: f64| (deg.to_radians()).powi(2);
        let mut diag = [0.0; BASE_DIM];
        let mut set = |off: usize, v: [f64; 3]| diag[off..off + 3].copy_from_slice(&v);
        set(L::POSITION, [i.position_std.powi(2); 3]);
        set(L::VELOCITY, [i.velocity_std.powi(2); 3]);
        set(L::ATTITUDE, [d(i.roll_pitch_std_deg), d(i.roll_pitch_std_deg), d(i.yaw_std_deg)]);
        set(L::ACCEL_BIAS, [i.accel_bias_std.powi(2); 3]);
        set(L::GYRO_BIAS, [i.gyro_bias_std.powi(2); 3]);
        if self.estimate_camera_extrinsics {
            set(L::CAMERA_TRANSLATION, [self.camera_extrinsics.translation_std.powi(2); 3]);
            set(L::CAMERA_ROTATION, [d(self.camera_extrinsics.rotation_std_deg); 3]);
        }
        if self.estimate_dvl_extrinsics {
            set(L::DVL_TRANSLATION, [self.dvl_extrinsics.translation_std.powi(2); 3]);
            set(L::DVL_ROTATION, [d(self.dvl_extrinsics.rotation_std_deg); 3]);
        }
        DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&diag))
    }
}

/// Nominal state at a ground-truth sample; extrinsics are left at identity.
pub fn nominal_from_truth(truth: &GroundTruth) -> NominalState {
    NominalState {
        timestamp: truth.t,
        p_wb: truth.p,
        v_wb: truth.v,
        r_wb: truth.r_wb,
        b_a: truth.b_a,
        b_g: truth.b_g,
        ..Default::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordSource {
    Camera,
    Dvl,
}

/// Filter state after one camera frame or DVL ping.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOutput {
    pub t: f64,
    pub source: RecordSource,
    pub p: Vec3,
    pub v: Vec3,
    pub r_wb: Rotation,
    pub b_a: Vec3,
    pub b_g: Vec3,
    pub t_bc: Transform,
    pub t_bd: Transform,
    pub std_p: Vec3,
    pub std_theta: Vec3,
    pub std_v: Vec3,
    pub std_b_a: Vec3,
    pub std_b_g: Vec3,
    pub std_dvl_rotation: Vec3,
    pub std_dvl_translation: Vec3,
    pub sigma_vis: f64,
    pub sigma_dvl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AwareRecord {
    pub t: f64,
    pub sensor: SensorId,
    pub q: f64,
    pub sigma: f64,
    pub enabled: bool,
    pub decision: Decision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingKind {
    FrontendIngest,
    VisualUpdate,
    DvlUpdate,
    Propagation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRecord {
    pub t: f64,
    pub kind: TimingKind,
    pub duration_ms: f64,
    pub tracks: usize,
    pub clones: usize,
}

#[derive(Debug, Clone)]
enum Pending {
    Dvl(DvlMeasurement),
    Frame(CameraFrame),
}

impl Pending {
    fn t(&self) -> f64 {
        match self {
            Pending::Dvl(m) => m.timestamp,
            Pending::Frame(f) => f.t,
        }
    }

    fn priority(&self) -> u8 {
        match self {
            Pending::Dvl(_) => 0,
            Pending::Frame(_) => 1,
        }
    }
}

pub struct Estimator {
    config: FilterConfig,
    camera: CameraModel,
    beams: BeamGeometry,
    filter: Option<FilterState>,
    last_imu: Option<ImuSample>,
    init_buffer: Vec<ImuSample>,
    latest_dvl: Option<DvlMeasurement>,
    recent_gyro: VecDeque<Vec3>,
    pending: Vec<Pending>,
    vis_health: SensorHealth,
    dvl_health: SensorHealth,
    tracks: BTreeMap<u64, Vec<(u64, Vector2<f64>)>>,
    last_keyframe: Option<HashMap<u64, Vector2<f64>>>,
    pub outputs: Vec<EstimatorOutput>,
    pub aware_log: Vec<AwareRecord>,
    pub timing: Vec<TimingRecord>,
    pub dvl_reports: Vec<DvlReport>,
    pub visual_reports: Vec<VisualReport>,
}

impl Estimator {
    pub fn new(config: FilterConfig) -> Result<Self, EstimatorError> {
        config.validate()?;
        let beams = BeamGeometry::new(config.beam_tilt, config.beam_azimuths)
            .map_err(|e| EstimatorError::InvalidConfig(e.to_string()))?;
        Ok(Self {
            camera: config.camera,
            beams,
            filter: None,
            last_imu: None,
            init_buffer: Vec::new(),
            latest_dvl: None,
            recent_gyro: VecDeque::new(),
            pending: Vec::new(),
            vis_health: SensorHealth::new(SensorId::Vis, config.aware.vis),
            dvl_health: SensorHealth::new(SensorId::Dvl, config.aware.dvl),
            tracks: BTreeMap::new(),
            last_keyframe: None,
            outputs: Vec::new(),
            aware_log: Vec::new(),
            timing: Vec::new(),
            dvl_reports: Vec::new(),
            visual_reports: Vec::new(),
            config,
        })
    }

    /// Starts from a known state; extrinsics come from the configuration.
    pub fn with_initial_state(config: FilterConfig, mut nominal: NominalState) -> Result<Self, EstimatorError> {
        let mut est = Self::new(config)?;
        nominal.t_bc = est.config.initial_t_bc();
        nominal.t_bd = est.config.initial_t_bd();
        est.filter = Some(FilterState::new(nominal, est.config.initial_covariance(), est.config.max_clones));
        Ok(est)
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    pub fn filter(&self) -> Option<&FilterState> {
        self.filter.as_ref()
    }

    pub fn health(&self, sensor: SensorId) -> &SensorHealth {
        match sensor {
            SensorId::Vis => &self.vis_health,
            SensorId::Dvl => &self.dvl_health,
        }
    }

    fn current_time(&self) -> Option<f64> {
        self.filter.as_ref().map(|f| f.nominal.timestamp)
    }

    pub fn push_imu(&mut self, sample: ImuSample) -> Result<(), EstimatorError> {
        if self.filter.is_none() {
            return self.initialize_with(sample);
        }
        let Some(prev) = self.last_imu.clone() else {
            // first sample after a supplied initial state
            let t0 = self.current_time().unwrap_or(sample.timestamp);
            if sample.timestamp < t0 - REORDER_TOLERANCE {
                return Ok(());
            }
            self.filter.as_mut().expect("initialized").nominal.timestamp = sample.timestamp;
            self.last_imu = Some(sample);
            return self.drain_pending(None);
        };
        if sample.timestamp <= prev.timestamp {
            return Err(EstimatorError::NonMonotonicEvent { t: sample.timestamp, current: prev.timestamp });
        }
        self.drain_pending(Some(&sample))?;
        let last = self.last_imu.clone().expect("set above");
        if sample.timestamp > last.timestamp {
            self.propagate(&last, &sample)?;
        }
        self.remember_gyro(sample.gyro);
        self.last_imu = Some(sample);
        Ok(())
    }

    pub fn push_dvl(&mut self, meas: DvlMeasurement) -> Result<(), EstimatorError> {
        self.push_measurement(Pending::Dvl(meas))
    }

    pub fn push_frame(&mut self, frame: CameraFrame) -> Result<(), EstimatorError> {
        self.push_measurement(Pending::Frame(frame))
    }

    fn push_measurement(&mut self, m: Pending) -> Result<(), EstimatorError> {
        if self.filter.is_none() {
            if let Pending::Dvl(d) = m {
                self.latest_dvl = Some(d);
            }
            return Ok(());
        }
        if let Some(now) = self.current_time() {
            if m.t() < now - REORDER_TOLERANCE {
                return Err(EstimatorError::NonMonotonicEvent { t: m.t(), current: now });
            }
        }
        let key = (m.t(), m.priority());
        let at = self.pending.partition_point(|p| (p.t(), p.priority()) <= key);
        self.pending.insert(at, m);
        if self.last_imu.as_ref().is_some_and(|s| key.0 <= s.timestamp) {
            self.drain_pending(None)?;
        }
        Ok(())
    }

    /// Processes buffered measurements covered by the IMU data seen so far
    /// (`next` extends coverage to its timestamp).
    fn drain_pending(&mut self, next: Option<&ImuSample>) -> Result<(), EstimatorError> {
        loop {
            let Some(last) = self.last_imu.clone() else { return Ok(()) };
            let horizon = next.map_or(last.timestamp, |n| n.timestamp);
            let Some(first) = self.pending.first() else { return Ok(()) };
            if first.t() > horizon {
                return Ok(());
            }
            let m = self.pending.remove(0);
            let t = m.t();
            let gyro = if t > last.timestamp {
                let n = next.expect("t beyond the last sample requires the next one");
                let mid = ImuSample::interpolate(&last, n, t);
                self.propagate(&last, &mid)?;
                self.last_imu = Some(mid.clone());
                mid.gyro
            } else {
                last.gyro
            };
            match m {
                Pending::Dvl(d) => {
                    let rate = self.smoothed_gyro(gyro);
                    self.process_dvl(&d, &rate)?
                }
                Pending::Frame(f) => self.process_frame(&f)?,
            }
        }
    }

    fn remember_gyro(&mut self, gyro: Vec3) {
        self.recent_gyro.push_back(gyro);
        while self.recent_gyro.len() > self.config.dvl_gyro_window.max(1) {
            self.recent_gyro.pop_front();
        }
    }

    /// Mean of `current` and the most recent samples, `dvl_gyro_window` in total.
    fn smoothed_gyro(&self, current: Vec3) -> Vec3 {
        let n = self.config.dvl_gyro_window.max(1);
        let older = self.recent_gyro.iter().rev().take(n - 1);
        let count = 1 + older.len();
        (current + older.sum::<Vec3>()) / count as f64
    }

    fn propagate(&mut self, a: &ImuSample, b: &ImuSample) -> Result<(), EstimatorError> {
        let filter = self.filter.as_mut().expect("initialized");
        propagate_filter(filter, a, b, &self.config.imu_noise)?;
        if !filter.nominal.p_wb.iter().chain(filter.nominal.v_wb.iter()).all(|x| x.is_finite()) {
            return Err(EstimatorError::Divergence { t: b.timestamp, reason: "non-finite state".into() });
        }
        Ok(())
    }

    fn initialize_with(&mut self, sample: ImuSample) -> Result<(), EstimatorError> {
        if self.config.init.mode == InitMode::Groundtruth {
            return Err(EstimatorError::InvalidConfig("groundtruth initialization needs an initial state".into()));
        }
        let t0 = self.init_buffer.first().map_or(sample.timestamp, |s| s.timestamp);
        let done = sample.timestamp - t0 >= self.config.init.static_duration;
        self.init_buffer.push(sample);
        if !done {
            return Ok(());
        }
        let n = self.init_buffer.len() as f64;
        let mean_a = self.init_buffer.iter().map(|s| s.accel).sum::<Vec3>() / n;
        let mean_g = self.init_buffer.iter().map(|s| s.gyro).sum::<Vec3>() / n;
        let last = self.init_buffer.last().cloned().expect("non-empty");
        let pitch = mean_a.x.atan2((mean_a.y * mean_a.y + mean_a.z * mean_a.z).sqrt());
        let roll = (-mean_a.y).atan2(-mean_a.z);
        let mut nominal = NominalState {
            timestamp: last.timestamp,
            r_wb: Rotation::from_euler_zyx(roll, pitch, 0.0),
            t_bc: self.config.initial_t_bc(),
            t_bd: self.config.initial_t_bd(),
            ..Default::default()
        };
        let mut cov = self.config.initial_covariance();
        if mean_g.norm() < self.config.init.static_gyro_threshold {
            nominal.b_g = mean_g;
        } else {
            let Some(ping) = self.latest_dvl.clone() else {
                return Err(EstimatorError::DynamicStart(mean_g.norm()));
            };
            let v_d = crate::dvl::beams_to_velocity(&ping, &self.beams)
                .map_err(|_| EstimatorError::DynamicStart(mean_g.norm()))?
                .v_d;
            nominal.v_wb = nominal.r_wb.rotate(&nominal.t_bd.rotation.rotate(&v_d));
            for k in 0..3 {
                cov[(L::VELOCITY + k, L::VELOCITY + k)] *= 4.0;
                cov[(L::ATTITUDE + k, L::ATTITUDE + k)] *= 4.0;
            }
        }
        self.filter = Some(FilterState::new(nominal, cov, self.config.max_clones));
        self.last_imu = Some(last);
        self.init_buffer.clear();
        Ok(())
    }

    fn check_divergence(&self, t: f64) -> Result<(), EstimatorError> {
        let f = self.filter.as_ref().expect("initialized");
        let finite = f.covariance.iter().all(|x| x.is_finite())
            && f.nominal.p_wb.iter().chain(f.nominal.v_wb.iter()).all(|x| x.is_finite());
        if !finite {
            return Err(EstimatorError::Divergence { t, reason: "non-finite state or covariance".into() });
        }
        if f.nominal.v_wb.norm() > 100.0 {
            return Err(EstimatorError::Divergence { t, reason: format!("speed {:.1} m/s", f.nominal.v_wb.norm()) });
        }
        Ok(())
    }

    fn log_aware(&mut self, t: f64, sensor: SensorId, q: f64, decision: Decision) {
        let h = self.health(sensor);
        self.aware_log.push(AwareRecord { t, sensor, q, sigma: h.sigma, enabled: h.enabled, decision });
    }

    /// Reliability decision for a scored measurement. With the gate off the
    /// measurement is always applied with its nominal covariance.
    fn decide(&mut self, t: f64, sensor: SensorId, q: f64, usable: bool) -> Decision {
        let decision = if !self.config.aware.enabled {
            if usable { Decision::UpdateWithScale(1.0) } else { Decision::Skip }
        } else {
            let health = match sensor {
                SensorId::Vis => &mut self.vis_health,
                SensorId::Dvl => &mut self.dvl_health,
            };
            match health.step(t, q) {
                Ok(Decision::UpdateWithScale(c)) if usable => Decision::UpdateWithScale(c),
                _ => Decision::Skip,
            }
        };
        self.log_aware(t, sensor, q, decision);
        decision
    }

    fn process_dvl(&mut self, meas: &DvlMeasurement, gyro: &Vec3) -> Result<(), EstimatorError> {
        let t = meas.timestamp;
        if self.config.use_dvl {
            let start = Instant::now();
            let mut meas = meas.clone();
            for s in &mut meas.beam_sigma {
                *s = s.max(self.config.min_beam_sigma);
            }
            let options = DvlUpdateOptions {
                estimate_extrinsics: self.config.estimate_dvl_extrinsics,
                gate: self.config.gate_dvl,
            };
            let filter = self.filter.as_ref().expect("initialized");
            let prepared = PreparedDvl::new(filter, &meas, &self.beams, gyro, &options).ok();
            let q = prepared.as_ref().map_or(0.0, |p| quality_score_dvl(&p.report(t, false)));
            let decision = self.decide(t, SensorId::Dvl, q, prepared.is_some());
            if let Some(p) = prepared {
                let mut applied = false;
                // the gate applies to the noise actually used, so an inflated
                // update can absorb a ping the nominal gate rejected
                match decision {
                    Decision::UpdateWithScale(c) if p.passes_gate(c) => {
                        // an ill-conditioned innovation leaves the state untouched
                        applied = p.apply(self.filter.as_mut().expect("initialized"), c).is_ok();
                    }
                    _ => {}
                }
                self.dvl_reports.push(p.report(t, applied));
            }
            self.timing.push(TimingRecord {
                t,
                kind: TimingKind::DvlUpdate,
                duration_ms: start.elapsed().as_secs_f64() * 1e3,
                tracks: 0,
                clones: self.filter.as_ref().map_or(0, |f| f.clones.len()),
            });
            self.check_divergence(t)?;
        }
        self.record(t, RecordSource::Dvl);
        Ok(())
    }

    fn is_keyframe(&self, frame: &CameraFrame) -> bool {
        let Some(last) = &self.last_keyframe else { return true };
        let mut common = 0usize;
        let mut motion = 0.0;
        for (id, z) in &frame.observations {
            if let Some(prev) = last.get(id) {
                common += 1;
                motion += (z - prev).norm();
            }
        }
        if common == 0 {
            return true;
        }
        (common as f64) < self.config.keyframe_track_ratio * last.len() as f64
            || motion / common as f64 > self.config.keyframe_parallax_px
    }

    fn process_frame(&mut self, frame: &CameraFrame) -> Result<(), EstimatorError> {
        let t = frame.t;
        if self.config.use_visual {
            let start = Instant::now();
            if frame.observations.len() < self.config.min_frame_features {
                // nothing usable in this frame: score it as an empty measurement
                if self.config.aware.enabled {
                    self.decide(t, SensorId::Vis, 0.0, false);
                }
            } else if self.is_keyframe(frame) {
                self.keyframe(frame)?;
            }
            self.timing.push(TimingRecord {
                t,
                kind: TimingKind::FrontendIngest,
                duration_ms: start.elapsed().as_secs_f64() * 1e3,
                tracks: frame.observations.len(),
                clones: self.filter.as_ref().map_or(0, |f| f.clones.len()),
            });
        }
        self.record(t, RecordSource::Camera);
        Ok(())
    }

    fn keyframe(&mut self, frame: &CameraFrame) -> Result<(), EstimatorError> {
        let t = frame.t;
        let observed: HashMap<u64, Vector2<f64>> = frame.observations.iter().cloned().collect();
        let filter = self.filter.as_ref().expect("initialized");
        let window_full = filter.clones.len() >= self.config.max_clones;
        let oldest = filter.clones.first().map(|c| c.frame_id);

        // ended tracks, plus everything touching the keyframe about to leave the window
        let mut ready: Vec<u64> = Vec::new();
        let mut dropped: Vec<u64> = Vec::new();
        for (id, obs) in &self.tracks {
            let ended = !observed.contains_key(id);
            let expiring = window_full && obs.first().map(|o| o.0) == oldest;
            if ended || expiring {
                if obs.len() >= self.config.min_track_length {
                    ready.push(*id);
                } else {
                    dropped.push(*id);
                }
            }
        }
        for id in &dropped {
            self.tracks.remove(id);
        }
        if !ready.is_empty() {
            // longest tracks first, capped
            ready.sort_by_key(|id| std::cmp::Reverse(self.tracks[id].len()));
            let used: Vec<FeatureTrack> = ready
                .iter()
                .take(self.config.max_tracks_per_update)
                .map(|id| FeatureTrack { feature_id: *id, observations: self.tracks[id].clone() })
                .collect();
            for id in &ready {
                self.tracks.remove(id);
            }
            self.visual_update(t, &used, frame.observations.len())?;
        }

        let filter = self.filter.as_mut().expect("initialized");
        if window_full {
            if let Some(id) = oldest {
                filter.marginalize_keyframe(id).expect("oldest keyframe is in the window");
                for obs in self.tracks.values_mut() {
                    obs.retain(|o| o.0 != id);
                }
                self.tracks.retain(|_, obs| !obs.is_empty());
            }
        }
        filter.augment_keyframe(frame.frame_id).expect("window has room after marginalization");
        for (id, z) in &frame.observations {
            self.tracks.entry(*id).or_default().push((frame.frame_id, *z));
        }
        self.last_keyframe = Some(observed);
        Ok(())
    }

    fn visual_update(&mut self, t: f64, tracks: &[FeatureTrack], tracked_now: usize) -> Result<(), EstimatorError> {
        let start = Instant::now();
        let options = VisualUpdateOptions {
            u_px: self.config.u_px,
            estimate_camera_extrinsics: self.config.estimate_camera_extrinsics,
            gate: self.config.gate_visual,
        };
        let filter = self.filter.as_ref().expect("initialized");
        let prepared = PreparedVisual::new(filter, tracks, &self.camera, &options, t).ok();
        let target = self.config.visual_target_features;
        let q = quality_from_visual(prepared.as_ref().map(|p| &p.report), tracked_now, target, self.config.u_px);
        let usable = prepared.as_ref().is_some_and(|p| p.h.nrows() > 0);
        let decision = self.decide(t, SensorId::Vis, q, usable);
        if let Some(mut p) = prepared {
            if let Decision::UpdateWithScale(c) = decision {
                // a failed update leaves `applied` false and the state untouched
                let _ = p.apply(self.filter.as_mut().expect("initialized"), c);
            }
            self.visual_reports.push(p.report);
        }
        self.timing.push(TimingRecord {
            t,
            kind: TimingKind::VisualUpdate,
            duration_ms: start.elapsed().as_secs_f64() * 1e3,
            tracks: tracks.len(),
            clones: self.filter.as_ref().map_or(0, |f| f.clones.len()),
        });
        self.check_divergence(t)
    }

    fn record(&mut self, t: f64, source: RecordSource) {
        let f = self.filter.as_ref().expect("initialized");
        let s = &f.nominal;
        let std = |b| f.block_std(b).unwrap_or_default();
        self.outputs.push(EstimatorOutput {
            t,
            source,
            p: s.p_wb,
            v: s.v_wb,
            r_wb: s.r_wb,
            b_a: s.b_a,
            b_g: s.b_g,
            t_bc: s.t_bc,
            t_bd: s.t_bd,
            std_p: std(Block::Position),
            std_theta: std(Block::Attitude),
            std_v: std(Block::Velocity),
            std_b_a: std(Block::AccelBias),
            std_b_g: std(Block::GyroBias),
            std_dvl_rotation: std(Block::DvlRotation),
            std_dvl_translation: std(Block::DvlTranslation),
            sigma_vis: self.vis_health.sigma,
            sigma_dvl: self.dvl_health.sigma,
        });
    }

    /// Processes any measurements still buffered at the end of a stream.
    pub fn finish(&mut self) -> Result<(), EstimatorError> {
        self.drain_pending(None)
    }

    /// One output per timestamp (the last one written), in time order.
    pub fn trajectory(&self) -> Vec<&EstimatorOutput> {
        let mut out: Vec<&EstimatorOutput> = Vec::with_capacity(self.outputs.len());
        for o in &self.outputs {
            match out.last_mut() {
                Some(last) if last.t == o.t => *last = o,
                _ => out.push(o),
            }
        }
        out
    }
}

/// Sensor streams, each sorted by time.
#[derive(Debug, Clone, Default)]
pub struct Streams<'a> {
    pub imu: &'a [ImuSample],
    pub dvl: &'a [DvlMeasurement],
    pub frames: &'a [CameraFrame],
}

/// Rows of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationCell {
    Full,
    NoAware,
    NoCalib,
    ImuDvl,
    ImuOnly,
}

impl AblationCell {
    pub const ALL: [AblationCell; 5] =
        [AblationCell::Full, AblationCell::NoAware, AblationCell::NoCalib, AblationCell::ImuDvl, AblationCell::ImuOnly];

    pub fn name(self) -> &'static str {
        match self {
            AblationCell::Full => "full",
            AblationCell::NoAware => "no_aware",
            AblationCell::NoCalib => "no_calib",
            AblationCell::ImuDvl => "imu_dvl",
            AblationCell::ImuOnly => "imu_only",
        }
    }

    /// Derives the cell's settings from a base configuration. Without AWARE
    /// the χ² gates are off too, so every measurement is fused at face value.
    pub fn apply(self, base: &FilterConfig) -> FilterConfig {
        let mut c = base.clone();
        match self {
            AblationCell::Full => {}
            AblationCell::NoAware => {
                c.aware.enabled = false;
                c.gate_visual = false;
                c.gate_dvl = false;
            }
            AblationCell::NoCalib => c.estimate_dvl_extrinsics = false,
            AblationCell::ImuDvl => c.use_visual = false,
            AblationCell::ImuOnly => {
                c.use_visual = false;
                c.use_dvl = false;
            }
        }
        c
    }
}

/// Feeds all streams in timestamp order (IMU, then DVL, then camera on ties).
pub fn run_streams(est: &mut Estimator, streams: Streams<'_>) -> Result<(), EstimatorError> {
    let (mut i, mut d, mut c) = (0, 0, 0);
    loop {
        let ti = streams.imu.get(i).map(|s| (s.timestamp, 0u8));
        let td = streams.dvl.get(d).map(|m| (m.timestamp, 1u8));
        let tc = streams.frames.get(c).map(|f| (f.t, 2u8));
        let next = [ti, td, tc].into_iter().flatten().min_by(|a, b| a.partial_cmp(b).expect("finite timestamps"));
        match next {
            None => break,
            Some((_, 0)) => {
                est.push_imu(streams.imu[i].clone())?;
                i += 1;
            }
            Some((_, 1)) => {
                est.push_dvl(streams.dvl[d].clone())?;
                d += 1;
            }
            Some(_) => {
                est.push_frame(streams.frames[c].clone())?;
                c += 1;
            }
        }
    }
    est.finish()
}

/// Extrinsic error per output record: `(t, rotation error in degrees, translation error in m)`.
pub fn calibration_trace(outputs: &[EstimatorOutput], truth: &Transform) -> Vec<(f64, f64, f64)> {
    outputs
        .iter()
        .map(|o| {
            let rot = left_minus(&o.t_bd.rotation, &truth.rotation).map(|v| v.norm()).unwrap_or(std::f64::consts::PI);
            (o.t, rot.to_degrees(), (o.t_bd.translation - truth.translation).norm())
        })
        .collect()
}
