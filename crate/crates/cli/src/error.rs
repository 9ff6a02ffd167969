use std::path::{Path, PathBuf};

use avio::eval::EvalError;
use avio::fusion::EstimatorError;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_THRESHOLD: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: `{key}`: {message}", path.display())]
    Config { path: PathBuf, key: String, message: String },
    #[error("{}: column `{column}`: {detail}", file.display())]
    Schema { file: PathBuf, column: String, detail: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("filter diverged: {0}")]
    Diverged(EstimatorError),
    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error("ATE RMSE {rmse:.4} m exceeds the limit of {limit} m")]
    Threshold { rmse: f64, limit: f64 },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Diverged(_) => EXIT_DIVERGED,
            CliError::Threshold { .. } => EXIT_THRESHOLD,
            _ => EXIT_INPUT,
        }
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn schema(file: &Path, column: &str, detail: impl Into<String>) -> CliError {
        CliError::Schema { file: file.to_path_buf(), column: column.to_string(), detail: detail.into() }
    }

    /// Filter failures on recorded data. Divergence keeps its own exit code;
    /// everything else is a problem with the inputs or the configuration.
    pub(crate) fn from_estimator(config: &Path, e: EstimatorError) -> CliError {
        match e {
            EstimatorError::Divergence { .. } => CliError::Diverged(e),
            EstimatorError::DynamicStart(_) | EstimatorError::InvalidConfig(_) => {
                CliError::Config { path: config.to_path_buf(), key: "filter".into(), message: e.to_string() }
            }
            other => CliError::Config { path: config.to_path_buf(), key: "dataset".into(), message: other.to_string() },
        }
    }
}
