//! Per-sensor reliability tracking: quality scores, multiplicative covariance
//! scaling, and disable/recover gating.
//!
//! For a sensor with scale `σ` and measurement covariance `R`, each scored
//! measurement takes one branch:
//!
//! * enabled, `q ≥ τ`: update with `R / σ²` ([`HealthyBranch::Tighten`]) or,
//!   by default, relax `σ ← max(1, σ/γ)` and update with `R`
//!   ([`HealthyBranch::Relax`])
//! * enabled, `q < τ`: `σ ← γσ`, record the event, update with `σR`; if the
//!   last `N` events span less than `ΔT` seconds the sensor is disabled and
//!   `σ`, the queue are reset
//! * disabled: skip; a score `q ≥ τ_rec` re-enables the sensor (with a reset)
//!   from the next measurement on

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dvl::{DvlReport, NUM_BEAMS};
use crate::vision::VisualReport;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AwareError {
    #[error("non-monotonic time for {sensor}: {prev} then {curr}")]
    NonMonotonicTime { sensor: SensorId, prev: f64, curr: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SensorId {
    Vis,
    Dvl,
}

impl fmt::Display for SensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SensorId::Vis => "VIS",
            SensorId::Dvl => "DVL",
        })
    }
}

/// What a healthy measurement does to the scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HealthyBranch {
    /// Update with `R / σ²`; `σ` only changes on unhealthy events and resets.
    Tighten,
    /// Relax `σ` by `1/γ` (not below 1) and update with `R`. Keeps the filter
    /// from becoming overconfident after a burst of unhealthy events.
    Relax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AwareParams {
    /// Unhealthy threshold τ.
    pub tau: f64,
    /// Recovery threshold τ_rec.
    pub tau_rec: f64,
    /// Scale growth γ per unhealthy event.
    pub gamma: f64,
    /// Queue capacity N.
    pub queue_len: usize,
    /// Disable when `queue_len` events span less than this, s.
    pub window_s: f64,
    pub healthy_branch: HealthyBranch,
}

impl Default for AwareParams {
    fn default() -> Self {
        Self { tau: 0.5, tau_rec: 0.8, gamma: 2.0, queue_len: 5, window_s: 2.0, healthy_branch: HealthyBranch::Relax }
    }
}

impl AwareParams {
    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.tau)
            && self.tau <= self.tau_rec
            && self.tau_rec <= 1.0
            && self.gamma > 1.0
            && self.queue_len >= 1
            && self.window_s > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    /// Apply the update with measurement covariance multiplied by the value.
    UpdateWithScale(f64),
    Skip,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::UpdateWithScale(c) => write!(f, "update({c})"),
            Decision::Skip => f.write_str("skip"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorHealth {
    pub sensor: SensorId,
    pub sigma: f64,
    pub queue: VecDeque<(f64, f64)>,
    pub enabled: bool,
    pub params: AwareParams,
    last_t: Option<f64>,
}

impl SensorHealth {
    pub fn new(sensor: SensorId, params: AwareParams) -> Self {
        Self { sensor, sigma: 1.0, queue: VecDeque::with_capacity(params.queue_len), enabled: true, params, last_t: None }
    }

    fn reset(&mut self) {
        self.sigma = 1.0;
        self.queue.clear();
    }

    /// Feeds one quality score and returns what to do with the measurement.
    pub fn step(&mut self, t: f64, q: f64) -> Result<Decision, AwareError> {
        if let Some(prev) = self.last_t {
            if t < prev {
                return Err(AwareError::NonMonotonicTime { sensor: self.sensor, prev, curr: t });
            }
        }
        self.last_t = Some(t);
        let p = self.params;
        if !self.enabled {
            if q >= p.tau_rec {
                self.enabled = true;
                self.reset();
            }
            return Ok(Decision::Skip);
        }
        if q >= p.tau {
            return Ok(match p.healthy_branch {
                HealthyBranch::Tighten => Decision::UpdateWithScale(1.0 / (self.sigma * self.sigma)),
                HealthyBranch::Relax => {
                    self.sigma = (self.sigma / p.gamma).max(1.0);
                    Decision::UpdateWithScale(1.0)
                }
            });
        }
        self.sigma *= p.gamma;
        self.queue.push_back((t, q));
        while self.queue.len() > p.queue_len {
            self.queue.pop_front();
        }
        if self.queue.len() == p.queue_len {
            let span = self.queue.back().map(|e| e.0).unwrap_or(t) - self.queue.front().map(|e| e.0).unwrap_or(t);
            if span < p.window_s {
                self.enabled = false;
                self.reset();
                return Ok(Decision::Skip);
            }
        }
        Ok(Decision::UpdateWithScale(self.sigma))
    }
}

pub fn quality_score_vis(inlier_ratio: f64, tracked: usize, target_count: usize, rms_px: f64, u_px: f64) -> f64 {
    let count = if target_count == 0 { 1.0 } else { (tracked as f64 / target_count as f64).min(1.0) };
    (0.4 * inlier_ratio + 0.3 * count + 0.3 * (-rms_px / u_px).exp()).clamp(0.0, 1.0)
}

/// Score of a prepared visual update; `None` (nothing usable) scores 0.
pub fn quality_from_visual(report: Option<&VisualReport>, tracked: usize, target_count: usize, u_px: f64) -> f64 {
    match report {
        Some(r) if r.tracks_used > 0 => {
            quality_score_vis(r.inlier_ratio(), tracked, target_count, r.reprojection_rms, u_px)
        }
        _ => 0.0,
    }
}

/// The residual is normalised by the innovation covariance so that a ping
/// consistent with the filter scores the same whether or not the state has
/// drifted (otherwise a disabled DVL could never recover).
pub fn quality_score_dvl(report: &DvlReport) -> f64 {
    let gate = if report.gate_passed { 1.0 } else { 0.0 };
    let ratio = report.residual_norm / report.innovation_trace.sqrt();
    (0.5 * gate + 0.3 * (-ratio).exp() + 0.2 * report.valid_beams as f64 / NUM_BEAMS as f64).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dvl_report(gate: bool, residual_norm: f64, innovation_trace: f64, beams: usize) -> DvlReport {
        DvlReport {
            innovation_trace,
            timestamp: 0.0,
            valid_beams: beams,
            residual_norm,
            sigma_trace: innovation_trace,
            mahalanobis: 0.0,
            gate_passed: gate,
            applied: gate,
        }
    }

    #[test]
    fn healthy_nominal_uses_unit_scale() {
        let mut h = SensorHealth::new(SensorId::Vis, AwareParams::default());
        assert_eq!(h.step(0.0, 0.9).unwrap(), Decision::UpdateWithScale(1.0));
    }

    fn tighten() -> AwareParams {
        AwareParams { healthy_branch: HealthyBranch::Tighten, ..Default::default() }
    }

    #[test]
    fn sigma_grows_by_gamma_then_update_uses_it() {
        for params in [AwareParams::default(), tighten()] {
            let mut h = SensorHealth::new(SensorId::Dvl, params);
            assert_eq!(h.step(0.0, 0.1).unwrap(), Decision::UpdateWithScale(2.0));
            assert_eq!(h.step(1.0, 0.1).unwrap(), Decision::UpdateWithScale(4.0));
            assert_eq!(h.sigma, 4.0);
            assert_eq!(h.queue.len(), 2);
        }
    }

    #[test]
    fn healthy_step_after_events() {
        let mut h = SensorHealth::new(SensorId::Dvl, tighten());
        h.step(0.0, 0.1).unwrap();
        h.step(1.0, 0.1).unwrap();
        assert_eq!(h.step(2.0, 0.9).unwrap(), Decision::UpdateWithScale(1.0 / 16.0));
        assert_eq!(h.sigma, 4.0);

        let mut h = SensorHealth::new(SensorId::Dvl, AwareParams::default());
        h.step(0.0, 0.1).unwrap();
        h.step(1.0, 0.1).unwrap();
        assert_eq!(h.step(2.0, 0.9).unwrap(), Decision::UpdateWithScale(1.0));
        assert_eq!(h.sigma, 2.0);
        h.step(3.0, 0.9).unwrap();
        h.step(4.0, 0.9).unwrap();
        assert_eq!(h.sigma, 1.0);
        // the queue is only cleared by enable transitions
        assert_eq!(h.queue.len(), 2);
    }

    #[test]
    fn burst_of_events_disables_and_resets() {
        let mut h = SensorHealth::new(SensorId::Vis, AwareParams::default());
        let times = [0.0, 0.4, 0.8, 1.2, 1.6];
        for (i, t) in times.iter().enumerate() {
            let d = h.step(*t, 0.0).unwrap();
            if i < 4 {
                assert!(matches!(d, Decision::UpdateWithScale(_)));
            } else {
                assert_eq!(d, Decision::Skip);
            }
        }
        assert!(!h.enabled);
        assert_eq!(h.sigma, 1.0);
        assert!(h.queue.is_empty());
    }

    #[test]
    fn span_equal_to_window_does_not_disable() {
        let mut h = SensorHealth::new(SensorId::Vis, AwareParams::default());
        for t in [0.0, 0.5, 1.0, 1.5, 2.0] {
            h.step(t, 0.0).unwrap();
        }
        assert!(h.enabled);
        assert_eq!(h.sigma, 32.0);
    }

    #[test]
    fn recovery_skips_then_behaves_like_new() {
        let params = AwareParams::default();
        let mut h = SensorHealth::new(SensorId::Dvl, params);
        for t in [0.0, 0.1, 0.2, 0.3, 0.4] {
            h.step(t, 0.0).unwrap();
        }
        assert!(!h.enabled);
        assert_eq!(h.step(0.5, 0.7).unwrap(), Decision::Skip);
        assert!(!h.enabled);
        assert_eq!(h.step(0.6, 0.85).unwrap(), Decision::Skip);
        assert!(h.enabled);
        let mut fresh = SensorHealth::new(SensorId::Dvl, params);
        fresh.last_t = Some(0.6);
        assert_eq!(h, fresh);
        assert_eq!(h.step(0.7, 0.9).unwrap(), Decision::UpdateWithScale(1.0));
    }

    #[test]
    fn time_must_not_go_back() {
        let mut h = SensorHealth::new(SensorId::Vis, AwareParams::default());
        h.step(1.0, 0.9).unwrap();
        assert!(matches!(h.step(0.5, 0.9), Err(AwareError::NonMonotonicTime { .. })));
        assert!(h.step(1.0, 0.9).is_ok());
    }

    #[test]
    fn queue_is_bounded() {
        let mut h = SensorHealth::new(SensorId::Vis, AwareParams::default());
        for k in 0..20 {
            h.step(k as f64 * 10.0, 0.0).unwrap();
            assert!(h.queue.len() <= 5);
        }
    }

    #[test]
    fn visual_quality_examples() {
        assert!((quality_score_vis(1.0, 100, 100, 0.0, 1.0) - 1.0).abs() < 1e-15);
        let q = quality_score_vis(0.5, 50, 100, 1.0, 1.0);
        assert!((q - (0.2 + 0.15 + 0.3 * (-1.0f64).exp())).abs() < 1e-15);
        assert!((q - 0.460).abs() < 1e-3);
        assert_eq!(quality_from_visual(None, 10, 100, 1.0), 0.0);
    }

    #[test]
    fn dvl_quality_examples() {
        assert!((quality_score_dvl(&dvl_report(true, 0.0, 1e-3, 4)) - 1.0).abs() < 1e-15);
        let q = quality_score_dvl(&dvl_report(true, 0.1, 0.01, 3));
        assert!((q - (0.5 + 0.3 * (-1.0f64).exp() + 0.15)).abs() < 1e-15);
        assert!((q - 0.760).abs() < 1e-3);
        assert!(quality_score_dvl(&dvl_report(false, 0.0, 1e-3, 4)) <= 0.5);
    }
}
