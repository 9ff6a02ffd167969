//! Dataset directory layout: `imu.csv`, `dvl.csv`, `features.csv`,
//! `groundtruth.csv`, `world.json` and `meta.json`.

use std::fs;
use std::path::Path;

use avio::dvl::{BeamReadings, DvlMeasurement, NUM_BEAMS};
use avio::eval::Pose;
use avio::geometry::{Rotation, Vec3};
use avio::propagation::ImuSample;
use avio::sim::{Dataset, SimConfig, WorldModel};
use avio::state::NominalState;
use avio::vision::CameraFrame;
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::table::{fmt_bool, fmt_f64, write_table, Table};

pub const IMU_FILE: &str = "imu.csv";
pub const DVL_FILE: &str = "dvl.csv";
pub const FEATURES_FILE: &str = "features.csv";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.csv";
pub const WORLD_FILE: &str = "world.json";
pub const META_FILE: &str = "meta.json";

pub const IMU_HEADER: &[&str] = &["t", "ax", "ay", "az", "gx", "gy", "gz"];
pub const DVL_HEADER: &[&str] = &["t", "df1", "df2", "df3", "df4", "valid1", "valid2", "valid3", "valid4"];
/// Radial velocities (m/s) for logs from instruments that convert on board.
pub const DVL_RADIAL_HEADER: &[&str] = &["t", "vr1", "vr2", "vr3", "vr4", "valid1", "valid2", "valid3", "valid4"];
pub const FEATURES_HEADER: &[&str] = &["t", "frame_id", "feature_id", "u", "v"];
pub const GROUNDTRUTH_HEADER: &[&str] = &["t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub seed: u64,
    /// Noise tier or other free-form label.
    pub label: String,
    /// Per-beam radial noise std of the DVL, m/s.
    pub dvl_beam_sigma: f64,
    /// Settings that produced a simulated dataset.
    #[serde(default)]
    pub simulation: Option<SimConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthPose {
    pub t: f64,
    pub p: Vec3,
    pub r: Rotation,
    pub v: Vec3,
}

impl TruthPose {
    pub fn pose(&self) -> Pose {
        Pose { t: self.t, p: self.p, r: self.r }
    }

    /// Initial nominal state; biases are unknown and start at zero.
    pub fn nominal(&self) -> NominalState {
        NominalState { timestamp: self.t, p_wb: self.p, v_wb: self.v, r_wb: self.r, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub imu: Vec<ImuSample>,
    pub dvl: Vec<DvlMeasurement>,
    pub frames: Vec<CameraFrame>,
    /// Empty when the directory has no `groundtruth.csv`.
    pub truth: Vec<TruthPose>,
    pub world: WorldModel,
    pub meta: DatasetMeta,
}

fn quat(r: &Rotation) -> [String; 4] {
    r.to_quaternion_wxyz().map(fmt_f64)
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    write_table(
        &dir.join(IMU_FILE),
        IMU_HEADER,
        data.imu.iter().map(|s| {
            let (a, g) = (s.accel, s.gyro);
            [s.timestamp, a.x, a.y, a.z, g.x, g.y, g.z].map(fmt_f64)
        }),
    )?;
    write_table(
        &dir.join(DVL_FILE),
        DVL_HEADER,
        data.dvl.iter().map(|m| {
            let values = match m.readings {
                BeamReadings::Doppler(v) | BeamReadings::Radial(v) => v,
            };
            let mut row = vec![fmt_f64(m.timestamp)];
            row.extend(values.map(fmt_f64));
            row.extend(m.valid.map(|b| fmt_bool(b).to_string()));
            row
        }),
    )?;
    let mut rows: Vec<[String; 5]> = Vec::new();
    for f in &data.frames {
        let (t, id) = (fmt_f64(f.t), f.frame_id.to_string());
        if f.observations.is_empty() {
            // keeps frames without features (e.g. blackouts) in the stream
            rows.push([t.clone(), id.clone(), String::new(), String::new(), String::new()]);
        }
        for (feature, z) in &f.observations {
            rows.push([t.clone(), id.clone(), feature.to_string(), fmt_f64(z.x), fmt_f64(z.y)]);
        }
    }
    write_table(&dir.join(FEATURES_FILE), FEATURES_HEADER, rows)?;
    write_table(
        &dir.join(GROUNDTRUTH_FILE),
        GROUNDTRUTH_HEADER,
        data.truth.iter().map(|g| {
            let mut row = vec![fmt_f64(g.t)];
            row.extend(g.p.iter().map(|x| fmt_f64(*x)));
            row.extend(quat(&g.r_wb));
            row.extend(g.v.iter().map(|x| fmt_f64(*x)));
            row
        }),
    )?;
    let beam_sigma = data.dvl.first().map_or(data.config.noise.beam_sigma, |m| m.beam_sigma[0]);
    let meta = DatasetMeta {
        seed: data.config.seed,
        label: data.config.label.clone(),
        dvl_beam_sigma: beam_sigma,
        simulation: Some(data.config.clone()),
    };
    write_json(&dir.join(WORLD_FILE), &data.world)?;
    write_json(&dir.join(META_FILE), &meta)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
    text.push('\n');
    fs::write(path, text).map_err(CliError::io(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let column = e.path().to_string();
        CliError::schema(path, &column, e.into_inner().to_string())
    })
}

pub fn read_imu(path: &Path) -> Result<Vec<ImuSample>, CliError> {
    let t = Table::read(path, &[IMU_HEADER])?;
    let times = t.times()?;
    let mut out = Vec::with_capacity(t.rows.len());
    for (r, &ts) in times.iter().enumerate() {
        let v = |c: usize| t.f64(r, c);
        out.push(ImuSample::new(ts, Vec3::new(v(1)?, v(2)?, v(3)?), Vec3::new(v(4)?, v(5)?, v(6)?)));
    }
    Ok(out)
}

pub fn read_dvl(path: &Path, world: &WorldModel, beam_sigma: f64) -> Result<Vec<DvlMeasurement>, CliError> {
    let t = Table::read(path, &[DVL_HEADER, DVL_RADIAL_HEADER])?;
    let times = t.times()?;
    let mut out = Vec::with_capacity(t.rows.len());
    for (r, &ts) in times.iter().enumerate() {
        let mut values = [0.0; NUM_BEAMS];
        let mut valid = [false; NUM_BEAMS];
        for b in 0..NUM_BEAMS {
            values[b] = t.f64(r, 1 + b)?;
            valid[b] = t.bool(r, 1 + NUM_BEAMS + b)?;
        }
        let readings = if t.variant == 0 { BeamReadings::Doppler(values) } else { BeamReadings::Radial(values) };
        out.push(DvlMeasurement {
            timestamp: ts,
            readings,
            valid,
            carrier_hz: world.carrier_hz,
            sound_speed: world.sound_speed,
            beam_sigma: [beam_sigma; NUM_BEAMS],
        });
    }
    Ok(out)
}

/// Rows of one frame must be contiguous and frame ids increasing; a row
/// with an empty `feature_id` marks a frame without observations.
pub fn read_features(path: &Path) -> Result<Vec<CameraFrame>, CliError> {
    let t = Table::read(path, &[FEATURES_HEADER])?;
    let times = t.times()?;
    let mut frames: Vec<CameraFrame> = Vec::new();
    for (r, &ts) in times.iter().enumerate() {
        let frame_id = t.u64(r, 1)?;
        let same = frames.last().is_some_and(|f| f.frame_id == frame_id);
        if !same {
            if frames.last().is_some_and(|f| f.frame_id > frame_id) {
                return Err(CliError::schema(path, "frame_id", format!("data row {}: frame ids must increase", r + 1)));
            }
            frames.push(CameraFrame { t: ts, frame_id, observations: Vec::new() });
        } else if frames.last().is_some_and(|f| f.t != ts) {
            return Err(CliError::schema(path, "t", format!("data row {}: frame {frame_id} has inconsistent timestamps", r + 1)));
        }
        let feature = t.opt_u64(r, 2)?;
        let (u, v) = (t.opt_f64(r, 3)?, t.opt_f64(r, 4)?);
        match (feature, u, v) {
            (Some(id), Some(u), Some(v)) => frames.last_mut().expect("pushed above").observations.push((id, Vector2::new(u, v))),
            (None, None, None) => {}
            _ => {
                return Err(CliError::schema(path, "feature_id", format!("data row {}: feature_id, u and v must be all set or all empty", r + 1)));
            }
        }
    }
    Ok(frames)
}

pub fn read_groundtruth(path: &Path) -> Result<Vec<TruthPose>, CliError> {
    let t = Table::read(path, &[GROUNDTRUTH_HEADER])?;
    let times = t.times()?;
    let mut out = Vec::with_capacity(t.rows.len());
    for (r, &ts) in times.iter().enumerate() {
        let v = |c: usize| t.f64(r, c);
        let q = [v(4)?, v(5)?, v(6)?, v(7)?];
        let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(CliError::schema(path, "qw", format!("data row {}: quaternion norm {norm} is not 1", r + 1)));
        }
        out.push(TruthPose {
            t: ts,
            p: Vec3::new(v(1)?, v(2)?, v(3)?),
            r: Rotation::from_quaternion_wxyz(q),
            v: Vec3::new(v(8)?, v(9)?, v(10)?),
        });
    }
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<LoadedDataset, CliError> {
    let world: WorldModel = read_json(&dir.join(WORLD_FILE))?;
    let meta: DatasetMeta = read_json(&dir.join(META_FILE))?;
    let gt_path = dir.join(GROUNDTRUTH_FILE);
    Ok(LoadedDataset {
        imu: read_imu(&dir.join(IMU_FILE))?,
        dvl: read_dvl(&dir.join(DVL_FILE), &world, meta.dvl_beam_sigma)?,
        frames: read_features(&dir.join(FEATURES_FILE))?,
        truth: if gt_path.exists() { read_groundtruth(&gt_path)? } else { Vec::new() },
        world,
        meta,
    })
}
