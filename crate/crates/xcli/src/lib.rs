//! Experiment runner for the multimodal misinformation detector.
//!
//! Every subcommand of the `mmfd` binary is also available in-process through
//! [`commands`], and [`cli::run`] returns the exit code the binary would.

pub mod cli;
pub mod commands;
pub mod plan;
pub mod report;
