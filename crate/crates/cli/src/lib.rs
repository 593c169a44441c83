//! Command-line front end: configuration, checkpoints and run output.

pub mod checkpoint;
pub mod config;
pub mod run;
pub mod sink;
