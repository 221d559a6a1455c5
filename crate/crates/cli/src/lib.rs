//! Experiment commands and the live annotation service built on `mixlabel-core`.

pub mod eval;
pub mod manifest;
pub mod report;
pub mod runs;
pub mod service;
pub mod setup;
pub mod synth_cmd;
