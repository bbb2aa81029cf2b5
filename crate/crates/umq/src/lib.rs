//! Dataset files, checkpoints, CSV reports and the command line around
//! `umq-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;

pub use error::{Error, Result};
