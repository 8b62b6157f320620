//! Command-line runner: data generation, training, evaluation, the check
//! suites, benchmarking and attention export.

pub mod checks;
pub mod commands;
