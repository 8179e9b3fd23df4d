//! File formats, the resumable experiment runner and the command-line
//! front end for `oarseg-core`.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod files;
pub mod runner;
pub mod tables;
pub mod volume_io;

pub use error::{AppError, Result};
