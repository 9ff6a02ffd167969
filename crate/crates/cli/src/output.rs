//! Files written by a filter run and read back by the evaluator.

use std::path::Path;

use avio::fusion::{AwareRecord, Estimator, EstimatorOutput, TimingKind, TimingRecord};
use avio::geometry::{Rotation, Transform, Vec3};

use crate::dataset::{read_groundtruth, TruthPose, GROUNDTRUTH_HEADER};
use crate::error::CliError;
use crate::table::{fmt_bool, fmt_f64, write_table, Table};

pub const ESTIMATE_FILE: &str = "estimate.csv";
pub const EXTRINSICS_FILE: &str = "extrinsics_trace.csv";
pub const AWARE_FILE: &str = "aware_log.csv";
pub const TIMING_FILE: &str = "timing.csv";

/// Same columns as `groundtruth.csv`.
pub const ESTIMATE_HEADER: &[&str] = GROUNDTRUTH_HEADER;
pub const EXTRINSICS_HEADER: &[&str] = &[
    "t", "dvl_qw", "dvl_qx", "dvl_qy", "dvl_qz", "dvl_px", "dvl_py", "dvl_pz", "cam_qw", "cam_qx", "cam_qy", "cam_qz",
    "cam_px", "cam_py", "cam_pz", "dvl_rot_std_deg", "dvl_trans_std_m",
];
pub const AWARE_HEADER: &[&str] = &["t", "sensor", "q", "sigma", "enabled", "decision"];
pub const TIMING_HEADER: &[&str] = &["t", "kind", "duration_ms", "tracks", "clones"];

fn vec3(v: &Vec3) -> [String; 3] {
    [v.x, v.y, v.z].map(fmt_f64)
}

fn transform(t: &Transform) -> Vec<String> {
    let mut row: Vec<String> = t.rotation.to_quaternion_wxyz().map(fmt_f64).to_vec();
    row.extend(vec3(&t.translation));
    row
}

pub fn timing_kind_name(kind: TimingKind) -> &'static str {
    match kind {
        TimingKind::FrontendIngest => "frontend_ingest",
        TimingKind::VisualUpdate => "visual_update",
        TimingKind::DvlUpdate => "dvl_update",
        TimingKind::Propagation => "propagation",
    }
}

pub fn write_estimate(path: &Path, outputs: &[&EstimatorOutput]) -> Result<(), CliError> {
    write_table(
        path,
        ESTIMATE_HEADER,
        outputs.iter().map(|o| {
            let mut row = vec![fmt_f64(o.t)];
            row.extend(vec3(&o.p));
            row.extend(o.r_wb.to_quaternion_wxyz().map(fmt_f64));
            row.extend(vec3(&o.v));
            row
        }),
    )
}

pub fn write_extrinsics(path: &Path, outputs: &[&EstimatorOutput]) -> Result<(), CliError> {
    write_table(
        path,
        EXTRINSICS_HEADER,
        outputs.iter().map(|o| {
            let mut row = vec![fmt_f64(o.t)];
            row.extend(transform(&o.t_bd));
            row.extend(transform(&o.t_bc));
            row.push(fmt_f64(o.std_dvl_rotation.norm().to_degrees()));
            row.push(fmt_f64(o.std_dvl_translation.norm()));
            row
        }),
    )
}

pub fn write_aware(path: &Path, log: &[AwareRecord]) -> Result<(), CliError> {
    write_table(
        path,
        AWARE_HEADER,
        log.iter().map(|a| {
            let sensor = serde_json::to_value(a.sensor).expect("enum serializes");
            [
                fmt_f64(a.t),
                sensor.as_str().unwrap_or_default().to_string(),
                fmt_f64(a.q),
                fmt_f64(a.sigma),
                fmt_bool(a.enabled).to_string(),
                a.decision.to_string(),
            ]
        }),
    )
}

pub fn write_timing(path: &Path, timing: &[TimingRecord]) -> Result<(), CliError> {
    write_table(
        path,
        TIMING_HEADER,
        timing.iter().map(|r| {
            [
                fmt_f64(r.t),
                timing_kind_name(r.kind).to_string(),
                fmt_f64(r.duration_ms),
                r.tracks.to_string(),
                r.clones.to_string(),
            ]
        }),
    )
}

/// All four run outputs into `dir`.
pub fn write_run(dir: &Path, est: &Estimator) -> Result<(), CliError> {
    let trajectory = est.trajectory();
    write_estimate(&dir.join(ESTIMATE_FILE), &trajectory)?;
    write_extrinsics(&dir.join(EXTRINSICS_FILE), &trajectory)?;
    write_aware(&dir.join(AWARE_FILE), &est.aware_log)?;
    write_timing(&dir.join(TIMING_FILE), &est.timing)
}

pub fn read_estimate(path: &Path) -> Result<Vec<TruthPose>, CliError> {
    read_groundtruth(path)
}

/// `(t, DVL extrinsic)` per row of a trace.
pub fn read_dvl_extrinsic_trace(path: &Path) -> Result<Vec<(f64, Transform)>, CliError> {
    let t = Table::read(path, &[EXTRINSICS_HEADER])?;
    let times = t.times()?;
    (0..t.rows.len())
        .map(|r| {
            let v = |c: usize| t.f64(r, c);
            let rotation = Rotation::from_quaternion_wxyz([v(1)?, v(2)?, v(3)?, v(4)?]);
            Ok((times[r], Transform::new(rotation, Vec3::new(v(5)?, v(6)?, v(7)?))))
        })
        .collect()
}

/// Last DVL extrinsic estimate of a trace.
pub fn read_final_dvl_extrinsic(path: &Path) -> Result<Option<Transform>, CliError> {
    Ok(read_dvl_extrinsic_trace(path)?.pop().map(|(_, x)| x))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AwareRow {
    pub t: f64,
    pub sensor: String,
    pub q: f64,
    pub sigma: f64,
    pub enabled: bool,
    pub decision: String,
}

pub fn read_aware(path: &Path) -> Result<Vec<AwareRow>, CliError> {
    let t = Table::read(path, &[AWARE_HEADER])?;
    let times = t.times()?;
    (0..t.rows.len())
        .map(|r| {
            Ok(AwareRow {
                t: times[r],
                sensor: t.str(r, 1).to_string(),
                q: t.f64(r, 2)?,
                sigma: t.f64(r, 3)?,
                enabled: t.bool(r, 4)?,
                decision: t.str(r, 5).to_string(),
            })
        })
        .collect()
}

/// `(kind, duration_ms)` per timed call.
pub fn read_timing(path: &Path) -> Result<Vec<(String, f64)>, CliError> {
    let t = Table::read(path, &[TIMING_HEADER])?;
    (0..t.rows.len()).map(|r| Ok((t.str(r, 1).to_string(), t.f64(r, 2)?))).collect()
}
