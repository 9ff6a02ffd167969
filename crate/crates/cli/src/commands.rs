//! `simulate`, `run`, `eval` and `ablate`.

use std::fs;
use std::path::{Path, PathBuf};

use avio::eval::DEFAULT_MAX_DT;
use avio::fusion::{run_streams, AblationCell, Estimator, EstimatorError, FilterConfig, InitMode, Streams};
use avio::sim::{simulate as synthesize, Dataset};

use crate::config::ExperimentConfig;
use crate::dataset::{read_dataset, read_groundtruth, read_json, write_dataset, write_json, DatasetMeta, LoadedDataset};
use crate::dataset::{GROUNDTRUTH_FILE, META_FILE, WORLD_FILE};
use crate::error::CliError;
use crate::output::{read_aware, read_estimate, read_final_dvl_extrinsic, read_timing, write_run};
use crate::output::{AWARE_FILE, ESTIMATE_FILE, EXTRINSICS_FILE, TIMING_FILE};
use crate::report::{build_report, MetricsReport, ReportInputs};
use crate::table::{fmt_f64, write_table};

pub const METRICS_FILE: &str = "metrics.json";

/// Simulates the `[simulation]` table of `config_path` into `out_dir`.
pub fn simulate(config_path: &Path, out_dir: &Path, seed: Option<u64>) -> Result<Dataset, CliError> {
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(seed) = seed {
        config.simulation.seed = seed;
    }
    let data = synthesize(&config.simulation);
    write_dataset(out_dir, &data)?;
    Ok(data)
}

/// Runs the filter over a loaded dataset. The estimator is returned even when
/// the run fails so that partial outputs can still be written.
pub fn run_filter(data: &LoadedDataset, filter: &FilterConfig) -> Result<(Estimator, Result<(), EstimatorError>), EstimatorError> {
    let mut config = filter.clone();
    config.adapt_to_world(&data.world, false);
    let mut est = match config.init.mode {
        InitMode::Static => Estimator::new(config)?,
        InitMode::Groundtruth => {
            let first = data.truth.first().ok_or_else(|| {
                EstimatorError::InvalidConfig("groundtruth initialization needs groundtruth.csv".into())
            })?;
            Estimator::with_initial_state(config, first.nominal())?
        }
    };
    let status = run_streams(&mut est, Streams { imu: &data.imu, dvl: &data.dvl, frames: &data.frames });
    Ok((est, status))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Drops every DVL ping, as if `dvl.csv` were empty.
    pub disable_dvl: bool,
    /// The filter has no random components; accepted for a uniform interface.
    pub seed: Option<u64>,
}

pub fn run(dataset_dir: &Path, config_path: &Path, out_dir: &Path, options: &RunOptions) -> Result<Estimator, CliError> {
    let config = ExperimentConfig::load(config_path)?;
    let mut data = read_dataset(dataset_dir)?;
    if options.disable_dvl {
        data.dvl.clear();
    }
    fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    let (est, status) = run_filter(&data, &config.filter).map_err(|e| CliError::from_estimator(config_path, e))?;
    write_run(out_dir, &est)?;
    status.map_err(|e| CliError::from_estimator(config_path, e))?;
    Ok(est)
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub max_rmse: Option<f64>,
    pub with_scale: bool,
    pub max_dt: f64,
    /// Defaults to `metrics.json` next to the estimate.
    pub out: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { max_rmse: None, with_scale: false, max_dt: DEFAULT_MAX_DT, out: None }
    }
}

fn sibling(path: &Path, name: &str) -> Option<PathBuf> {
    let p = path.parent().unwrap_or(Path::new(".")).join(name);
    p.exists().then_some(p)
}

/// Scores `estimate_path` against `gt_path`. Run logs next to the estimate
/// and `world.json`/`meta.json` next to the ground truth are used when present.
pub fn eval(estimate_path: &Path, gt_path: &Path, options: &EvalOptions) -> Result<MetricsReport, CliError> {
    let estimate = read_estimate(estimate_path)?;
    let truth = read_groundtruth(gt_path)?;
    let final_dvl_extrinsic = match sibling(estimate_path, EXTRINSICS_FILE) {
        Some(p) => read_final_dvl_extrinsic(&p)?,
        None => None,
    };
    let true_dvl_extrinsic = match sibling(gt_path, WORLD_FILE) {
        Some(p) => Some(read_json::<avio::sim::WorldModel>(&p)?.t_bd()),
        None => None,
    };
    let sequence = match sibling(gt_path, META_FILE) {
        Some(p) => read_json::<DatasetMeta>(&p)?.label,
        None => gt_path.parent().and_then(|d| d.file_name()).map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
    };
    let timing = match sibling(estimate_path, TIMING_FILE) {
        Some(p) => read_timing(&p)?,
        None => Vec::new(),
    };
    let aware = match sibling(estimate_path, AWARE_FILE) {
        Some(p) => read_aware(&p)?,
        None => Vec::new(),
    };
    let report = build_report(&ReportInputs {
        sequence,
        estimate: &estimate,
        truth: &truth,
        final_dvl_extrinsic,
        true_dvl_extrinsic,
        timing: &timing,
        aware: &aware,
        max_dt: options.max_dt,
        with_scale: options.with_scale,
    })?;
    let out = options.out.clone().unwrap_or_else(|| estimate_path.parent().unwrap_or(Path::new(".")).join(METRICS_FILE));
    write_json(&out, &report)?;
    if let Some(limit) = options.max_rmse {
        if !(report.ate_rmse_m <= limit) {
            return Err(CliError::Threshold { rmse: report.ate_rmse_m, limit });
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellOutcome {
    Ok(MetricsReport),
    /// Divergence or an unusable trajectory, with the reason.
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub outcome: CellOutcome,
}

impl AblationRow {
    pub fn rmse(&self) -> Option<f64> {
        match &self.outcome {
            CellOutcome::Ok(r) => Some(r.ate_rmse_m),
            CellOutcome::Failed(_) => None,
        }
    }
}

/// Runs every ablation cell on one dataset. Each cell writes its run outputs
/// and `metrics.json` under `out_dir/<cell>/`; the matrix is summarised in
/// `summary.csv` and `summary.md`.
pub fn ablate(dataset_dir: &Path, config_path: Option<&Path>, out_dir: &Path) -> Result<Vec<AblationRow>, CliError> {
    let default_name = Path::new("<defaults>");
    let config = match config_path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let data = read_dataset(dataset_dir)?;
    let gt_path = dataset_dir.join(GROUNDTRUTH_FILE);
    let mut rows = Vec::new();
    for cell in AblationCell::ALL {
        let dir = out_dir.join(cell.name());
        fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
        let (est, status) = run_filter(&data, &cell.apply(&config.filter))
            .map_err(|e| CliError::from_estimator(config_path.unwrap_or(default_name), e))?;
        write_run(&dir, &est)?;
        let outcome = match status {
            Err(e) => CellOutcome::Failed(e.to_string()),
            Ok(()) => match eval(&dir.join(ESTIMATE_FILE), &gt_path, &EvalOptions::default()) {
                Ok(r) if r.ate_rmse_m.is_finite() => CellOutcome::Ok(r),
                Ok(r) => CellOutcome::Failed(format!("non-finite ATE {}", r.ate_rmse_m)),
                Err(e) => CellOutcome::Failed(e.to_string()),
            },
        };
        rows.push(AblationRow { cell, outcome });
    }
    write_summary(out_dir, &rows)?;
    Ok(rows)
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), fmt_f64)
}

fn write_summary(out_dir: &Path, rows: &[AblationRow]) -> Result<(), CliError> {
    let header = ["cell", "status", "ate_rmse_m", "ate_std_m", "extrinsic_final_err_deg", "extrinsic_final_err_m"];
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| match &r.outcome {
            CellOutcome::Ok(m) => [
                r.cell.name().to_string(),
                "ok".to_string(),
                fmt_f64(m.ate_rmse_m),
                fmt_f64(m.ate_std_m),
                opt(m.extrinsic_final_err_deg),
                opt(m.extrinsic_final_err_m),
            ],
            CellOutcome::Failed(_) => {
                [r.cell.name(), "F", "F", "F", "F", "F"].map(str::to_string)
            }
        })
        .collect();
    write_table(&out_dir.join("summary.csv"), &header, cells.iter())?;
    let path = out_dir.join("summary.md");
    fs::write(&path, summary_table(rows)).map_err(CliError::io(&path))
}

/// Markdown table of the matrix; failed cells read "F".
pub fn summary_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| cell | ATE RMSE (m) | STD (m) | extrinsic err (deg / m) |\n|---|---|---|---|\n");
    for r in rows {
        let line = match &r.outcome {
            CellOutcome::Ok(m) => {
                let ext = match (m.extrinsic_final_err_deg, m.extrinsic_final_err_m) {
                    (Some(d), Some(t)) => format!("{d:.3} / {t:.3}"),
                    _ => "-".to_string(),
                };
                format!("| {} | {:.3} | {:.3} | {ext} |\n", r.cell.name(), m.ate_rmse_m, m.ate_std_m)
            }
            CellOutcome::Failed(_) => format!("| {} | F | F | F |\n", r.cell.name()),
        };
        s.push_str(&line);
    }
    s
}
