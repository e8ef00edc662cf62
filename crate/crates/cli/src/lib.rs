//! Experiment driver for hierarchical multi-output Gaussian processes.
//!
//! Every stage reads a [`RunConfig`] and writes plain CSV and JSON files.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_eval, cmd_experiment, cmd_fit, cmd_generate, cmd_predict, run_experiment, ExperimentSummary, MeanSd,
    PredictionRow, RunManifest,
};
pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Model(#[from] hmogp::Error),
}

impl CliError {
    /// 2 config, 3 I/O, 4 numerical or fit failure, 5 malformed data.
    pub fn exit_code(&self) -> i32 {
        use hmogp::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Data(_) => 5,
            CliError::Model(e) => match e {
                E::InvalidParameter { .. } | E::UnsupportedFamily { .. } | E::SizeGuard { .. } => 2,
                E::Io(_) => 3,
                E::Indefinite { .. } | E::NonFinite { .. } | E::FitFailed(_) | E::Metric(_) => 4,
                E::DimensionMismatch { .. }
                | E::NotSquare { .. }
                | E::ReplicaTag { .. }
                | E::Schema { .. }
                | E::Json(_) => 5,
            },
        }
    }
}
