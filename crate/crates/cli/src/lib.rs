//! Experiment harness for joint learning and unlearning: configuration,
//! run orchestration, persistence and reporting behind the `jlu` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod presets;
pub mod report;
pub mod run;

pub use config::RunConfig;
pub use error::CliError;
