//! End-to-end experiment driver: configuration, storage, training and the
//! command implementations behind the `wsodlab` binary.

pub mod commands;
pub mod config;
pub mod store;
pub mod train;

pub use config::ExperimentConfig;
