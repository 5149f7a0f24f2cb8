//! Experiment drivers: configuration, data generation, training, the
//! Laplace baseline, numerical verification, timing and reporting.

pub mod commands;
pub mod config;
pub mod metrics;
pub mod report;
pub mod svg;

pub use commands::{
    cmd_gen_data, cmd_laplace, cmd_timing, cmd_train, cmd_verify, evaluate, laplace_pipeline, Evaluation,
    GenDataOutput, LaplaceOutput, Setup, TimingOutput, TrainOutput, VerifyOutput,
};
pub use config::{ExperimentConfig, Precision, PtoModeName};
pub use report::{cmd_report, ReportOutput};
