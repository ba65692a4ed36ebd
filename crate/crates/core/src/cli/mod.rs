//! Experiment runner: configuration parsing, training and paired stability
//! runs, and the averaged-variance report.

pub mod config;
pub mod run;

pub use config::{
    load_config, parse_config, parse_config_in, DatasetConfig, DatasetSource, ExperimentConfig, Mode,
};
pub use run::{
    format_report, load_datasets, run_stability_pair, run_train, variance_report, StabilityOutcome,
    TrainOutcome,
};
