//! Command-line front end: synthetic data, pipeline stages, configuration.

pub mod config;
pub mod pipeline;
pub mod synth;
