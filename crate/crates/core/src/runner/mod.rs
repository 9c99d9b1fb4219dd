//! Experiment orchestration: configuration, data preparation, mode/attack
//! sweeps, persisted logs and tables, and plot series.

mod config;
mod experiment;
mod report;
mod synthetic;

use std::path::Path;

use thiserror::Error;

use crate::dataio::DataError;
use crate::federation::FedError;
use crate::metrics::MetricsError;
use crate::model::ModelError;

pub use config::{AttackSweep, DataConfig, ExperimentConfig, Overrides};
pub use experiment::{prepare_data, run_experiment, training_data, write_prepared, PreparedData};
pub use report::{emit_plot_data, load_report, CellReport, ExperimentReport, ForecastTrace, PlotFiles};
pub use synthetic::{generate_synthetic, normal_quantile, SyntheticData, SyntheticSpec};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("data missing: {0}")]
    DataMissing(String),
    #[error("run diverged: {0}")]
    RunDiverged(String),
    #[error("report incomplete: {0}")]
    ReportIncomplete(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Federation(FedError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<FedError> for RunnerError {
    fn from(e: FedError) -> Self {
        match e {
            FedError::Diverged { .. } | FedError::NonFiniteGradient { .. } => Self::RunDiverged(e.to_string()),
            FedError::Config(m) => Self::ConfigInvalid(m),
            FedError::Threat(t) => Self::ConfigInvalid(t.to_string()),
            other => Self::Federation(other),
        }
    }
}

/// Write through a sibling temp file and rename, so readers never see a
/// partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}
