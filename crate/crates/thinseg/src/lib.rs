//! File formats, checkpoints, reports, parallel runners and the `thinseg`
//! command-line tool built on `thinseg-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pgm;
pub mod report;
pub mod runner;

pub use error::{Error, Result};
