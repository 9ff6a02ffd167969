mod support;

use std::fs;
use std::path::Path;

use avio_cli::commands::{self, EvalOptions, RunOptions, METRICS_FILE};
use avio_cli::dataset::{read_groundtruth, DVL_FILE, DVL_HEADER, GROUNDTRUTH_FILE, IMU_FILE};
use avio_cli::output::{read_estimate, AWARE_FILE, ESTIMATE_FILE, EXTRINSICS_FILE};
use avio_cli::CliError;
use serde_json::Value;
use support::{arg, avio, fixture, short_config};

fn simulated(dir: &Path, name: &str, duration: f64) -> (std::path::PathBuf, std::path::PathBuf) {
    let config = short_config(dir, name, duration);
    let data = dir.join(format!("{name}_data"));
    commands::simulate(&config, &data, None).unwrap();
    (config, data)
}

#[test]
fn noiseless_run_tracks_groundtruth() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = simulated(dir.path(), "zero", 10.0);
    let out = dir.path().join("run");
    let status = avio(&["run", "--dataset", arg(&data), "--config", arg(&config), "--out", arg(&out)]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));

    let truth = read_groundtruth(&data.join(GROUNDTRUTH_FILE)).unwrap();
    let estimate = read_estimate(&out.join(ESTIMATE_FILE)).unwrap();
    assert!(estimate.len() > 100);
    let mut j = 0;
    for e in &estimate {
        while truth[j].t < e.t - 1e-9 {
            j += 1;
        }
        assert!((truth[j].t - e.t).abs() < 1e-9);
        assert!((truth[j].p - e.p).norm() < 1e-4, "t={} err={}", e.t, (truth[j].p - e.p).norm());
    }
}

#[test]
fn disabled_dvl_matches_an_empty_dvl_stream() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = simulated(dir.path(), "nm", 6.0);
    let disabled = dir.path().join("disabled");
    commands::run(&data, &config, &disabled, &RunOptions { disable_dvl: true, seed: None }).unwrap();

    fs::write(data.join(DVL_FILE), DVL_HEADER.join(",") + "\n").unwrap();
    let empty = dir.path().join("empty");
    commands::run(&data, &config, &empty, &RunOptions::default()).unwrap();

    for name in [ESTIMATE_FILE, EXTRINSICS_FILE, AWARE_FILE] {
        assert_eq!(fs::read(disabled.join(name)).unwrap(), fs::read(empty.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn groundtruth_scores_zero_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = simulated(dir.path(), "nm", 3.0);
    let gt = data.join(GROUNDTRUTH_FILE);
    let out = dir.path().join("self.json");
    let report = commands::eval(&gt, &gt, &EvalOptions { out: Some(out.clone()), ..Default::default() }).unwrap();
    assert!(report.ate_rmse_m <= 1e-12, "{}", report.ate_rmse_m);
    assert!(report.paired_count > 0);
    assert!(out.exists());
}

#[test]
fn rmse_threshold_exits_four_and_still_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = simulated(dir.path(), "nm", 3.0);
    let gt = data.join(GROUNDTRUTH_FILE);
    let run = dir.path().join("run");
    fs::create_dir_all(&run).unwrap();

    // alternating vertical offsets cannot be aligned away
    let text = fs::read_to_string(&gt).unwrap();
    let mut lines = text.lines();
    let mut shifted = format!("{}\n", lines.next().unwrap());
    for (i, line) in lines.enumerate() {
        let mut cells: Vec<String> = line.split(',').map(str::to_string).collect();
        let z: f64 = cells[3].parse().unwrap();
        cells[3] = (z + if i % 2 == 0 { 0.5 } else { -0.5 }).to_string();
        shifted += &(cells.join(",") + "\n");
    }
    let estimate = run.join(ESTIMATE_FILE);
    fs::write(&estimate, shifted).unwrap();

    let out = avio(&["eval", "--estimate", arg(&estimate), "--groundtruth", arg(&gt), "--max-rmse", "0.3"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&fs::read(run.join(METRICS_FILE)).unwrap()).unwrap();
    let rmse = report["ate_rmse_m"].as_f64().unwrap();
    assert!((rmse - 0.5).abs() < 0.01, "{rmse}");

    match commands::eval(&estimate, &gt, &EvalOptions { max_rmse: Some(0.3), ..Default::default() }) {
        Err(e @ CliError::Threshold { .. }) => assert_eq!(e.exit_code(), 4),
        other => panic!("{other:?}"),
    }
    let passing = avio(&["eval", "--estimate", arg(&estimate), "--groundtruth", arg(&gt), "--max-rmse", "0.6"]);
    assert!(passing.status.success());
}

/// Every key of `schema` appears in `value` with the declared type, and nothing else does.
fn conforms(value: &Value, schema: &Value, path: &str) -> Result<(), String> {
    match schema {
        Value::Object(fields) => {
            let obj = value.as_object().ok_or(format!("{path}: expected an object"))?;
            let mut keys: Vec<_> = obj.keys().collect();
            let mut expected: Vec<_> = fields.keys().collect();
            keys.sort();
            expected.sort();
            if keys != expected {
                return Err(format!("{path}: keys {keys:?} vs {expected:?}"));
            }
            fields.iter().try_for_each(|(k, s)| conforms(&obj[k], s, &format!("{path}.{k}")))
        }
        Value::String(types) => {
            let ok = types.split('|').any(|t| match t {
                "string" => value.is_string(),
                "number" => value.is_number(),
                "integer" => value.is_u64() || value.is_i64(),
                "boolean" => value.is_boolean(),
                "null" => value.is_null(),
                _ => false,
            });
            if ok { Ok(()) } else { Err(format!("{path}: {value} is not {types}")) }
        }
        _ => Err(format!("{path}: bad schema node")),
    }
}

#[test]
fn ablation_writes_every_cell_and_a_conforming_report() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = simulated(dir.path(), "zero", 6.0);
    let out = dir.path().join("ablate");
    let status = avio(&["ablate", "--dataset", arg(&data), "--config", arg(&config), "--out", arg(&out)]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let table = String::from_utf8_lossy(&status.stdout);
    assert_eq!(table.lines().filter(|l| l.starts_with("| ")).count(), 6, "{table}");

    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 6);
    assert!(summary.starts_with("cell,status,ate_rmse_m"));

    let schema: Value = serde_json::from_slice(&fs::read(fixture("metrics_report.schema.json")).unwrap()).unwrap();
    let cells: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    assert_eq!(cells.len(), 5);
    for cell in cells {
        let report: Value = serde_json::from_slice(&fs::read(cell.join(METRICS_FILE)).unwrap()).unwrap();
        conforms(&report, &schema, &cell.display().to_string()).unwrap();
    }
}

#[test]
fn runaway_acceleration_exits_three_with_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = simulated(dir.path(), "zero", 4.0);
    let imu = data.join(IMU_FILE);
    let text = fs::read_to_string(&imu).unwrap();
    let mut lines = text.lines();
    let mut broken = format!("{}\n", lines.next().unwrap());
    for line in lines {
        let mut cells: Vec<&str> = line.split(',').collect();
        if cells[0].parse::<f64>().unwrap() > 1.0 {
            cells[1] = "1000";
        }
        broken += &(cells.join(",") + "\n");
    }
    fs::write(&imu, broken).unwrap();

    let out = dir.path().join("run");
    let status = avio(&["run", "--dataset", arg(&data), "--config", arg(&config), "--out", arg(&out), "--disable-dvl"]);
    assert_eq!(status.status.code(), Some(3), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(String::from_utf8_lossy(&status.stderr).contains("diverge"));
    let estimate = read_estimate(&out.join(ESTIMATE_FILE)).unwrap();
    assert!(!estimate.is_empty());
    assert!(estimate.last().unwrap().t < 2.0);
}
