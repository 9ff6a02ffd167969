//! Synthetic ground truth and sensor streams.
//!
//! Every profile is a closed-form function of time with analytic first and
//! second derivatives, so the emitted IMU signals are kinematically exact and
//! integrating them reproduces the pose up to the integrator's own error.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dvl::{radial_to_doppler, BeamGeometry, BeamReadings, DvlMeasurement, NUM_BEAMS};
use crate::geometry::{Rotation, Transform, Vec3};
use crate::propagation::{ImuNoiseParams, ImuSample};
use crate::state::GRAVITY;
use crate::vision::{CameraFrame, CameraModel, Z_MIN};

/// Trajectory shape. Angles in radians, rates in rad/s, lengths in metres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Profile {
    /// Horizontal circle with the body x axis along the velocity, optional
    /// depth oscillation and roll/pitch excitation.
    Circle {
        radius: f64,
        rate: f64,
        #[serde(default)]
        depth_amplitude: f64,
        #[serde(default)]
        depth_frequency: f64,
        #[serde(default)]
        roll_amplitude: f64,
        #[serde(default)]
        pitch_amplitude: f64,
        #[serde(default)]
        excitation_frequency: f64,
    },
    /// Lissajous figure with a constant yaw rate and optional roll/pitch
    /// oscillation. Frequencies are angular, rad/s.
    Lissajous {
        amplitude: [f64; 3],
        frequency: [f64; 3],
        phase: [f64; 3],
        yaw_rate: f64,
        #[serde(default)]
        roll_amplitude: f64,
        #[serde(default)]
        pitch_amplitude: f64,
        #[serde(default)]
        excitation_frequency: f64,
    },
    /// Back-and-forth legs along x while slowly sweeping across y, heading held.
    Lawnmower { leg_length: f64, leg_frequency: f64, width: f64, yaw: f64 },
    Stationary {
        #[serde(default)]
        position: [f64; 3],
        #[serde(default)]
        roll: f64,
        #[serde(default)]
        pitch: f64,
        #[serde(default)]
        yaw: f64,
    },
}

impl Default for Profile {
    fn default() -> Self {
        Profile::Circle {
            radius: 2.0,
            rate: 0.2,
            depth_amplitude: 0.0,
            depth_frequency: 0.0,
            roll_amplitude: 0.0,
            pitch_amplitude: 0.0,
            excitation_frequency: 0.0,
        }
    }
}

/// Position and ZYX Euler angles `(roll, pitch, yaw)` with derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Kinematics {
    p: Vec3,
    v: Vec3,
    a: Vec3,
    euler: Vec3,
    euler_dot: Vec3,
}

fn harmonic(amp: f64, freq: f64, phase: f64, t: f64) -> (f64, f64, f64) {
    let arg = freq * t + phase;
    (amp * arg.sin(), amp * freq * arg.cos(), -amp * freq * freq * arg.sin())
}

impl Profile {
    fn kinematics(&self, t: f64, duration: f64) -> Kinematics {
        match *self {
            Profile::Circle {
                radius,
                rate,
                depth_amplitude,
                depth_frequency,
                roll_amplitude,
                pitch_amplitude,
                excitation_frequency,
            } => {
                let th = rate * t;
                let (z, vz, az) = harmonic(depth_amplitude, depth_frequency, 0.0, t);
                let (roll, droll, _) = harmonic(roll_amplitude, excitation_frequency, 0.0, t);
                let (pitch, dpitch, _) = harmonic(pitch_amplitude, 1.3 * excitation_frequency, 0.5, t);
                Kinematics {
                    p: Vec3::new(radius * th.cos(), radius * th.sin(), z),
                    v: Vec3::new(-radius * rate * th.sin(), radius * rate * th.cos(), vz),
                    a: Vec3::new(-radius * rate * rate * th.cos(), -radius * rate * rate * th.sin(), az),
                    euler: Vec3::new(roll, pitch, th + FRAC_PI_2 * rate.signum()),
                    euler_dot: Vec3::new(droll, dpitch, rate),
                }
            }
            Profile::Lissajous {
                amplitude,
                frequency,
                phase,
                yaw_rate,
                roll_amplitude,
                pitch_amplitude,
                excitation_frequency,
            } => {
                let (roll, droll, _) = harmonic(roll_amplitude, excitation_frequency, 0.0, t);
                let (pitch, dpitch, _) = harmonic(pitch_amplitude, 1.3 * excitation_frequency, 0.5, t);
                let mut k = Kinematics {
                    p: Vec3::zeros(),
                    v: Vec3::zeros(),
                    a: Vec3::zeros(),
                    euler: Vec3::new(roll, pitch, yaw_rate * t),
                    euler_dot: Vec3::new(droll, dpitch, yaw_rate),
                };
                for i in 0..3 {
                    let (x, v, a) = harmonic(amplitude[i], frequency[i], phase[i], t);
                    k.p[i] = x;
                    k.v[i] = v;
                    k.a[i] = a;
                }
                k
            }
            Profile::Lawnmower { leg_length, leg_frequency, width, yaw } => {
                let (x, vx, ax) = harmonic(0.5 * leg_length, leg_frequency, 0.0, t);
                // cosine ramp across the width so the sweep starts and ends at rest
                let s = PI / duration.max(1e-9);
                let y = -0.5 * width * (s * t).cos();
                let vy = 0.5 * width * s * (s * t).sin();
                let ay = 0.5 * width * s * s * (s * t).cos();
                Kinematics {
                    p: Vec3::new(x, y, 0.0),
                    v: Vec3::new(vx, vy, 0.0),
                    a: Vec3::new(ax, ay, 0.0),
                    euler: Vec3::new(0.0, 0.0, yaw),
                    euler_dot: Vec3::zeros(),
                }
            }
            Profile::Stationary { position, roll, pitch, yaw } => Kinematics {
                p: Vec3::from(position),
                v: Vec3::zeros(),
                a: Vec3::zeros(),
                euler: Vec3::new(roll, pitch, yaw),
                euler_dot: Vec3::zeros(),
            },
        }
    }
}

/// True state and noise-free inertial signals at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthSample {
    pub t: f64,
    pub p: Vec3,
    pub v: Vec3,
    pub r_wb: Rotation,
    /// Body angular rate, rad/s.
    pub omega_b: Vec3,
    /// Specific force in the body frame, m/s².
    pub f_b: Vec3,
}

pub fn truth_at(profile: &Profile, t: f64, duration: f64, gravity_w: &Vec3) -> TruthSample {
    let k = profile.kinematics(t, duration);
    let (roll, pitch, yaw) = (k.euler.x, k.euler.y, k.euler.z);
    let r_wb = Rotation::from_euler_zyx(roll, pitch, yaw);
    let (dr, dp, dy) = (k.euler_dot.x, k.euler_dot.y, k.euler_dot.z);
    let omega_b = Vec3::new(
        dr - dy * pitch.sin(),
        dp * roll.cos() + dy * roll.sin() * pitch.cos(),
        -dp * roll.sin() + dy * roll.cos() * pitch.cos(),
    );
    let f_b = r_wb.matrix().transpose() * (k.a - gravity_w);
    TruthSample { t, p: k.p, v: k.v, r_wb, omega_b, f_b }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_landmarks: usize,
    /// Box extents `[x, y, z]`, centred on the origin.
    pub box_size: [f64; 3],
    /// Landmarks farther than this are not observed, m.
    pub max_range: f64,
    pub camera: CameraModel,
    /// Camera-to-body rotation (ZYX roll, pitch, yaw) applied on top of the
    /// forward-looking mounting, and translation.
    pub camera_rotation_rpy: [f64; 3],
    pub camera_translation: [f64; 3],
    /// DVL-to-body rotation (ZYX roll, pitch, yaw) and translation.
    pub dvl_rotation_rpy: [f64; 3],
    pub dvl_translation: [f64; 3],
    pub beam_tilt: f64,
    pub beam_azimuths: [f64; NUM_BEAMS],
    pub sound_speed: f64,
    pub carrier_hz: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let janus = BeamGeometry::janus();
        Self {
            num_landmarks: 500,
            box_size: [10.0, 10.0, 5.0],
            max_range: 8.0,
            camera: CameraModel::default(),
            camera_rotation_rpy: [0.0; 3],
            camera_translation: [0.2, 0.0, 0.1],
            dvl_rotation_rpy: [0.0; 3],
            dvl_translation: [0.0, 0.0, 0.2],
            beam_tilt: janus.tilt,
            beam_azimuths: janus.azimuths,
            sound_speed: 1500.0,
            carrier_hz: 600e3,
        }
    }
}

/// Camera looking along body +x: image x along body +y, image y along body +z.
pub fn forward_camera_rotation() -> Rotation {
    Rotation::from_matrix_unchecked(Matrix3::new(0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0))
}

impl WorldConfig {
    pub fn t_bc(&self) -> Transform {
        let [r, p, y] = self.camera_rotation_rpy;
        Transform::new(Rotation::from_euler_zyx(r, p, y) * forward_camera_rotation(), Vec3::from(self.camera_translation))
    }

    pub fn t_bd(&self) -> Transform {
        let [r, p, y] = self.dvl_rotation_rpy;
        Transform::new(Rotation::from_euler_zyx(r, p, y), Vec3::from(self.dvl_translation))
    }
}

/// Everything fixed about the simulated environment, as stored with a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    pub landmarks: Vec<[f64; 3]>,
    pub camera: CameraModel,
    pub t_bc_rotation_wxyz: [f64; 4],
    pub t_bc_translation: [f64; 3],
    pub t_bd_rotation_wxyz: [f64; 4],
    pub t_bd_translation: [f64; 3],
    pub beam_tilt: f64,
    pub beam_azimuths: [f64; NUM_BEAMS],
    pub sound_speed: f64,
    pub carrier_hz: f64,
    pub max_range: f64,
}

impl WorldModel {
    pub fn t_bc(&self) -> Transform {
        Transform::new(Rotation::from_quaternion_wxyz(self.t_bc_rotation_wxyz), Vec3::from(self.t_bc_translation))
    }

    pub fn t_bd(&self) -> Transform {
        Transform::new(Rotation::from_quaternion_wxyz(self.t_bd_rotation_wxyz), Vec3::from(self.t_bd_translation))
    }

    pub fn beams(&self) -> BeamGeometry {
        BeamGeometry::new(self.beam_tilt, self.beam_azimuths).expect("world beam geometry is valid")
    }
}

/// Noise and fault injection. All-zero is the default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub imu: ImuNoiseParams,
    pub initial_accel_bias: [f64; 3],
    pub initial_gyro_bias: [f64; 3],
    /// Pixel noise std, px.
    pub pixel_sigma: f64,
    /// Per-beam radial velocity noise std, m/s.
    pub beam_sigma: f64,
    /// Probability an observation is replaced by a uniform in-image draw.
    pub pixel_outlier_rate: f64,
    /// Per-beam probability of a flagged dropout.
    pub dvl_dropout_rate: f64,
    /// Per-ping probability of a silent gross error on every beam.
    pub dvl_outlier_rate: f64,
    /// Gross radial error magnitude, m/s (uniform sign per beam).
    pub dvl_outlier_magnitude: f64,
    /// Intervals `[t0, t1]` with no visual observations.
    pub visual_blackouts: Vec<[f64; 2]>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            imu: ImuNoiseParams { sigma_a: 0.0, sigma_g: 0.0, sigma_aw: 0.0, sigma_gw: 0.0 },
            initial_accel_bias: [0.0; 3],
            initial_gyro_bias: [0.0; 3],
            pixel_sigma: 0.0,
            beam_sigma: 0.0,
            pixel_outlier_rate: 0.0,
            dvl_dropout_rate: 0.0,
            dvl_outlier_rate: 0.0,
            dvl_outlier_magnitude: 1.0,
            visual_blackouts: Vec::new(),
        }
    }
}

impl NoiseConfig {
    pub fn in_blackout(&self, t: f64) -> bool {
        self.visual_blackouts.iter().any(|[a, b]| t >= *a && t <= *b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub seed: u64,
    /// Free-form label stored with the dataset (e.g. the noise tier).
    pub label: String,
    pub duration: f64,
    pub imu_rate: f64,
    pub cam_rate: f64,
    pub dvl_rate: f64,
    pub profile: Profile,
    pub world: WorldConfig,
    pub noise: NoiseConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            label: "zero".into(),
            duration: 60.0,
            imu_rate: 200.0,
            cam_rate: 10.0,
            dvl_rate: 5.0,
            profile: Profile::default(),
            world: WorldConfig::default(),
            noise: NoiseConfig::default(),
        }
    }
}

impl SimConfig {
    /// First invalid setting, if any, as a key path and reason.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let bad = |k: &str, why: &str| Err((k.to_string(), why.to_string()));
        if !(self.duration > 0.0) {
            return bad("duration", "must be positive");
        }
        for (k, r) in [("imu_rate", self.imu_rate), ("cam_rate", self.cam_rate), ("dvl_rate", self.dvl_rate)] {
            if !(r > 0.0) {
                return bad(k, "must be positive");
            }
        }
        if 1.0 / self.imu_rate > crate::propagation::MAX_IMU_DT {
            return bad("imu_rate", "IMU period exceeds the propagation limit");
        }
        let n = &self.noise;
        for (k, p) in [
            ("noise.pixel_outlier_rate", n.pixel_outlier_rate),
            ("noise.dvl_dropout_rate", n.dvl_dropout_rate),
            ("noise.dvl_outlier_rate", n.dvl_outlier_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(k, "must be a probability");
            }
        }
        let i = &n.imu;
        if [i.sigma_a, i.sigma_g, i.sigma_aw, i.sigma_gw, n.pixel_sigma, n.beam_sigma].iter().any(|s| !(*s >= 0.0)) {
            return bad("noise", "standard deviations must be non-negative");
        }
        if !self.world.camera.is_valid() {
            return bad("world.camera", "invalid intrinsics");
        }
        if BeamGeometry::new(self.world.beam_tilt, self.world.beam_azimuths).is_err() {
            return bad("world.beam_azimuths", "degenerate beam geometry");
        }
        if !(1400.0..=1600.0).contains(&self.world.sound_speed) {
            return bad("world.sound_speed", "outside 1400..1600 m/s");
        }
        Ok(())
    }
}

/// Ground truth at an IMU timestamp, including the true biases.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub t: f64,
    pub p: Vec3,
    pub v: Vec3,
    pub r_wb: Rotation,
    pub b_a: Vec3,
    pub b_g: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub dvl: Vec<DvlMeasurement>,
    pub frames: Vec<CameraFrame>,
    pub truth: Vec<GroundTruth>,
    pub world: WorldModel,
    pub config: SimConfig,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn randn3(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng))
}

fn times(duration: f64, rate: f64) -> impl Iterator<Item = f64> {
    let n = (duration * rate + 1e-9).floor() as u64;
    (0..=n).map(move |k| k as f64 / rate)
}

/// Landmarks uniformly on the four vertical walls of the box.
pub fn make_world(config: &WorldConfig, seed: u64) -> WorldModel {
    let mut rng = stream_rng(seed, 1);
    let [sx, sy, sz] = config.box_size;
    let (hx, hy, hz) = (0.5 * sx, 0.5 * sy, 0.5 * sz);
    let perimeter = 2.0 * (sx + sy);
    let landmarks = (0..config.num_landmarks)
        .map(|_| {
            let s = rng.gen_range(0.0..perimeter);
            let z = rng.gen_range(-hz..hz);
            let (x, y) = if s < sx {
                (-hx + s, -hy)
            } else if s < sx + sy {
                (hx, -hy + (s - sx))
            } else if s < 2.0 * sx + sy {
                (hx - (s - sx - sy), hy)
            } else {
                (-hx, hy - (s - 2.0 * sx - sy))
            };
            [x, y, z]
        })
        .collect();
    let (t_bc, t_bd) = (config.t_bc(), config.t_bd());
    WorldModel {
        landmarks,
        camera: config.camera,
        t_bc_rotation_wxyz: t_bc.rotation.to_quaternion_wxyz(),
        t_bc_translation: t_bc.translation.into(),
        t_bd_rotation_wxyz: t_bd.rotation.to_quaternion_wxyz(),
        t_bd_translation: t_bd.translation.into(),
        beam_tilt: config.beam_tilt,
        beam_azimuths: config.beam_azimuths,
        sound_speed: config.sound_speed,
        carrier_hz: config.carrier_hz,
        max_range: config.max_range,
    }
}

/// IMU samples with white noise `σ/√dt` and bias random walks `σ√dt`, plus
/// the ground truth at the same timestamps.
pub fn synth_imu(config: &SimConfig) -> (Vec<ImuSample>, Vec<GroundTruth>) {
    let mut rng = stream_rng(config.seed, 2);
    let n = &config.noise;
    let dt = 1.0 / config.imu_rate;
    let gravity = Vec3::new(0.0, 0.0, GRAVITY);
    let mut b_a = Vec3::from(n.initial_accel_bias);
    let mut b_g = Vec3::from(n.initial_gyro_bias);
    let mut imu = Vec::new();
    let mut truth = Vec::new();
    for t in times(config.duration, config.imu_rate) {
        let s = truth_at(&config.profile, t, config.duration, &gravity);
        let accel = s.f_b + b_a + randn3(&mut rng) * (n.imu.sigma_a / dt.sqrt());
        let gyro = s.omega_b + b_g + randn3(&mut rng) * (n.imu.sigma_g / dt.sqrt());
        imu.push(ImuSample::new(t, accel, gyro));
        truth.push(GroundTruth { t, p: s.p, v: s.v, r_wb: s.r_wb, b_a, b_g });
        b_a += randn3(&mut rng) * (n.imu.sigma_aw * dt.sqrt());
        b_g += randn3(&mut rng) * (n.imu.sigma_gw * dt.sqrt());
    }
    (imu, truth)
}

/// True DVL-frame velocity: `R_bDᵀ (R_wbᵀ v + ω × p_bD)`.
pub fn true_dvl_velocity(s: &TruthSample, t_bd: &Transform) -> Vec3 {
    t_bd.rotation.matrix().transpose() * (s.r_wb.matrix().transpose() * s.v + s.omega_b.cross(&t_bd.translation))
}

/// Pings with Doppler-domain noise of std `2 f_t σ / c_s`, flagged dropouts and
/// silent outliers.
pub fn synth_dvl(config: &SimConfig, world: &WorldModel) -> Vec<DvlMeasurement> {
    let mut rng = stream_rng(config.seed, 3);
    let n = &config.noise;
    let geom = world.beams();
    let t_bd = world.t_bd();
    let gravity = Vec3::new(0.0, 0.0, GRAVITY);
    let (f_t, c_s) = (world.carrier_hz, world.sound_speed);
    let shift_sigma = 2.0 * f_t * n.beam_sigma / c_s;
    times(config.duration, config.dvl_rate)
        .map(|t| {
            let s = truth_at(&config.profile, t, config.duration, &gravity);
            let radial = geom.project(&true_dvl_velocity(&s, &t_bd));
            let outlier = rng.gen_bool(n.dvl_outlier_rate);
            let mut shifts = [0.0; NUM_BEAMS];
            let mut valid = [true; NUM_BEAMS];
            for b in 0..NUM_BEAMS {
                let mut v_r = radial[b];
                if outlier {
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    v_r += sign * n.dvl_outlier_magnitude * rng.gen_range(0.5..1.0);
                }
                let noise: f64 = StandardNormal.sample(&mut rng);
                shifts[b] = radial_to_doppler(v_r, f_t, c_s) + shift_sigma * noise;
                if rng.gen_bool(n.dvl_dropout_rate) {
                    valid[b] = false;
                    shifts[b] = 0.0;
                }
            }
            DvlMeasurement {
                timestamp: t,
                readings: BeamReadings::Doppler(shifts),
                valid,
                carrier_hz: f_t,
                sound_speed: c_s,
                beam_sigma: [n.beam_sigma.max(1e-4); NUM_BEAMS],
            }
        })
        .collect()
}

/// Pixel observations of every visible landmark per camera frame. A landmark
/// keeps its track id while continuously visible and gets a fresh one after
/// any gap (including blackouts).
pub fn synth_features(config: &SimConfig, world: &WorldModel) -> Vec<CameraFrame> {
    let mut rng = stream_rng(config.seed, 4);
    let n = &config.noise;
    let cam = world.camera;
    let t_bc = world.t_bc();
    let gravity = Vec3::new(0.0, 0.0, GRAVITY);
    let pixel = Normal::new(0.0, n.pixel_sigma.max(0.0)).expect("finite pixel sigma");
    let mut active: HashMap<usize, u64> = HashMap::new();
    let mut next_id = 0u64;
    times(config.duration, config.cam_rate)
        .enumerate()
        .map(|(k, t)| {
            let mut frame = CameraFrame { t, frame_id: k as u64, observations: Vec::new() };
            if n.in_blackout(t) {
                active.clear();
                return frame;
            }
            let s = truth_at(&config.profile, t, config.duration, &gravity);
            let t_wc = Transform::new(s.r_wb, s.p).compose(&t_bc);
            let mut seen = HashMap::new();
            for (j, xi) in world.landmarks.iter().enumerate() {
                let x_c = t_wc.apply_inverse(&Vec3::from(*xi));
                if !(x_c.z > Z_MIN) || x_c.norm() > world.max_range {
                    continue;
                }
                let Ok(px) = cam.project(&x_c) else { continue };
                if !cam.contains(&px) {
                    continue;
                }
                let id = *active.get(&j).unwrap_or_else(|| {
                    next_id += 1;
                    &next_id
                });
                seen.insert(j, id);
                let z = if rng.gen_bool(n.pixel_outlier_rate) {
                    Vector2::new(rng.gen_range(0.0..cam.width), rng.gen_range(0.0..cam.height))
                } else {
                    px + Vector2::new(pixel.sample(&mut rng), pixel.sample(&mut rng))
                };
                frame.observations.push((id, z));
            }
            active = seen;
            frame
        })
        .collect()
}

pub fn simulate(config: &SimConfig) -> Dataset {
    let world = make_world(&config.world, config.seed);
    let (imu, truth) = synth_imu(config);
    let dvl = synth_dvl(config, &world);
    let frames = synth_features(config, &world);
    Dataset { imu, dvl, frames, truth, world, config: config.clone() }
}
