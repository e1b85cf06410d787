//! Experiment driver for the TPSR toolkit: configuration, the in-memory
//! pipeline, and the file-level commands behind the `tpsr` binary.

pub mod commands;
pub mod config;
pub mod pipeline;
