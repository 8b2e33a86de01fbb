//! Support library for the `rsmoe` binary: config-file handling, metric
//! formatting and the benchmark runner. Split out so integration tests can
//! exercise the pieces directly.

pub mod bench;
pub mod config;
pub mod format;
