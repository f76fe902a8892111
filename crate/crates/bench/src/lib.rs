//! Command-line front end for the builtin switched-system benchmarks.

pub mod commands;
pub mod config;
pub mod output;
