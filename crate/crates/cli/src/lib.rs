//! Command-line front end for flowrefine: config files, presets, and run artifacts.

pub mod config;
pub mod error;
pub mod experiment;
pub mod preset;
