//! File formats, configuration, experiment suite and command-line driver
//! around `cm3-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod formats;
pub mod transform;

pub use error::{PipelineError, Result};
