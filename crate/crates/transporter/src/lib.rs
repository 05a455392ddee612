//! Experiment harness around `transporter-core`: the checkpoint container,
//! TOML configuration, reproducibility manifests and the subcommands behind
//! the `transporter` binary.

pub mod checkpoint;
pub mod config;
pub mod container;
pub mod run;
pub mod suites;
pub mod commands;
