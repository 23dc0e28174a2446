//! Experiment configuration, evaluation, metrics files and ablations.

mod config;
mod experiment;
mod metrics;

use thiserror::Error;

use crate::data::DataError;
use crate::federation::FederationError;
use crate::model::ModelError;

pub use config::{DataSource, ExperimentConfig, IdxDomain, Method, DEFAULT_FRACTION};
pub use experiment::{evaluate, load_data, predict, run_ablation, run_experiment, Ablation, Evaluation, ExperimentResult, Timing};
pub use metrics::{
    average_curve, average_of, csv_header, first_round_reaching, parse_csv, summarize, DomainScore, MetricsRow, SeedSummary,
    Summary,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("bad config at `{path}`: {message}")]
    BadConfig { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("test set for domain {0} is empty")]
    EmptyTestSet(String),
    #[error("metrics parse error: {0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Model(#[from] ModelError),
}
