//! File formats and subcommand implementations for the `pdro` binary,
//! exposed as a library so integration tests can drive the full pipeline
//! in-process.

pub mod commands;
pub mod formats;
