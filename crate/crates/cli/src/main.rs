use std::path::PathBuf;
use std::process::ExitCode;

use avio::eval::DEFAULT_MAX_DT;
use avio_cli::commands::{self, CellOutcome, EvalOptions, RunOptions};
use avio_cli::CliError;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "avio", version, about = "Acoustic-visual-inertial odometry: simulate, run, evaluate, ablate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the `[simulation]` table of a config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `simulation.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the filter over a dataset directory.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ignore dvl.csv entirely.
        #[arg(long)]
        disable_dvl: bool,
        /// Accepted for symmetry; the filter itself is deterministic.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score an estimate against ground truth and write a metrics report.
    Eval {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        groundtruth: PathBuf,
        /// Exit with status 4 when the ATE RMSE exceeds this, m.
        #[arg(long)]
        max_rmse: Option<f64>,
        /// Similarity instead of rigid alignment.
        #[arg(long)]
        with_scale: bool,
        /// Association tolerance, s.
        #[arg(long, default_value_t = DEFAULT_MAX_DT)]
        max_dt: f64,
        /// Report path; defaults to metrics.json next to the estimate.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the {full, no-AWARE, no-calib, IMU+DVL, IMU-only} matrix.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base filter settings; library defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let data = commands::simulate(&config, &out, seed)?;
            println!(
                "wrote {} IMU samples, {} DVL pings, {} camera frames to {}",
                data.imu.len(),
                data.dvl.len(),
                data.frames.len(),
                out.display()
            );
        }
        Command::Run { dataset, config, out, disable_dvl, seed } => {
            let est = commands::run(&dataset, &config, &out, &RunOptions { disable_dvl, seed })?;
            println!("wrote {} estimates to {}", est.trajectory().len(), out.display());
        }
        Command::Eval { estimate, groundtruth, max_rmse, with_scale, max_dt, out, seed: _ } => {
            let options = EvalOptions { max_rmse, with_scale, max_dt, out };
            match commands::eval(&estimate, &groundtruth, &options) {
                Ok(report) => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
                Err(e) => return Err(e),
            }
        }
        Command::Ablate { dataset, out, config, seed: _ } => {
            let rows = commands::ablate(&dataset, config.as_deref(), &out)?;
            print!("{}", commands::summary_table(&rows));
            for r in &rows {
                if let CellOutcome::Failed(why) = &r.outcome {
                    eprintln!("{}: F ({why})", r.cell.name());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
