//! Command layer of the screening pipeline: configuration file handling,
//! the five batch commands, and CSV/SVG report writers. The `strabscreen`
//! binary is a thin argument parser over this library so integration
//! tests can drive commands in-process.

pub mod commands;
pub mod config;
pub mod report;
