//! Evaluation summary of one run.

use avio::eval::{evaluate, EvalError};
use avio::geometry::{left_minus, Transform};
use serde::{Deserialize, Serialize};

use crate::dataset::TruthPose;
use crate::output::AwareRow;

/// Mean wall-clock time per call, ms.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeBreakdown {
    pub frontend_ingest: f64,
    pub visual_update: f64,
    pub dvl_update: f64,
    /// IMU propagation.
    pub other: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSummary {
    pub measurements: usize,
    pub updates: usize,
    /// Updates with inflated noise (scale above 1).
    pub inflated_updates: usize,
    pub skipped: usize,
    pub disables: usize,
    pub reenables: usize,
    pub max_sigma: f64,
    pub enabled_at_end: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AwareSummary {
    pub vis: SensorSummary,
    pub dvl: SensorSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub sequence: String,
    pub ate_rmse_m: f64,
    pub ate_std_m: f64,
    pub paired_count: usize,
    /// `null` when no extrinsic trace or true extrinsic is available.
    pub extrinsic_final_err_deg: Option<f64>,
    pub extrinsic_final_err_m: Option<f64>,
    pub runtime_breakdown_ms: RuntimeBreakdown,
    pub aware_summary: AwareSummary,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { 0.0 } else { sum / n as f64 }
}

pub fn runtime_breakdown(timing: &[(String, f64)]) -> RuntimeBreakdown {
    let of = |kind: &str| mean(timing.iter().filter(|(k, _)| k == kind).map(|(_, ms)| *ms));
    RuntimeBreakdown {
        frontend_ingest: of("frontend_ingest"),
        visual_update: of("visual_update"),
        dvl_update: of("dvl_update"),
        other: of("propagation"),
    }
}

fn sensor_summary(rows: &[&AwareRow]) -> SensorSummary {
    let mut s = SensorSummary { enabled_at_end: true, ..Default::default() };
    let mut enabled = true;
    for r in rows {
        s.measurements += 1;
        if r.decision == "skip" {
            s.skipped += 1;
        } else {
            s.updates += 1;
            if r.decision != "update(1)" {
                s.inflated_updates += 1;
            }
        }
        match (enabled, r.enabled) {
            (true, false) => s.disables += 1,
            (false, true) => s.reenables += 1,
            _ => {}
        }
        enabled = r.enabled;
        s.max_sigma = s.max_sigma.max(r.sigma);
    }
    s.enabled_at_end = enabled;
    s
}

pub fn aware_summary(log: &[AwareRow]) -> AwareSummary {
    let of = |name: &str| sensor_summary(&log.iter().filter(|r| r.sensor == name).collect::<Vec<_>>());
    AwareSummary { vis: of("VIS"), dvl: of("DVL") }
}

/// `(rotation error in degrees, translation error in m)`.
pub fn extrinsic_error(estimate: &Transform, truth: &Transform) -> (f64, f64) {
    let rot = left_minus(&estimate.rotation, &truth.rotation).map_or(180.0, |v| v.norm().to_degrees());
    (rot, (estimate.translation - truth.translation).norm())
}

pub struct ReportInputs<'a> {
    pub sequence: String,
    pub estimate: &'a [TruthPose],
    pub truth: &'a [TruthPose],
    pub final_dvl_extrinsic: Option<Transform>,
    pub true_dvl_extrinsic: Option<Transform>,
    pub timing: &'a [(String, f64)],
    pub aware: &'a [AwareRow],
    pub max_dt: f64,
    pub with_scale: bool,
}

pub fn build_report(inputs: &ReportInputs<'_>) -> Result<MetricsReport, EvalError> {
    let est: Vec<_> = inputs.estimate.iter().map(TruthPose::pose).collect();
    let gt: Vec<_> = inputs.truth.iter().map(TruthPose::pose).collect();
    let (ate, assoc) = evaluate(&est, &gt, inputs.max_dt, inputs.with_scale)?;
    let ext = match (&inputs.final_dvl_extrinsic, &inputs.true_dvl_extrinsic) {
        (Some(e), Some(t)) => Some(extrinsic_error(e, t)),
        _ => None,
    };
    Ok(MetricsReport {
        sequence: inputs.sequence.clone(),
        ate_rmse_m: ate.rmse,
        ate_std_m: ate.std,
        paired_count: assoc.pairs.len(),
        extrinsic_final_err_deg: ext.map(|e| e.0),
        extrinsic_final_err_m: ext.map(|e| e.1),
        runtime_breakdown_ms: runtime_breakdown(inputs.timing),
        aware_summary: aware_summary(inputs.aware),
    })
}
