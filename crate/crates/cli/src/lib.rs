//! Pipeline orchestration for the `nmvq` command: configuration, run
//! directories, manifests, metric reports and figures.

pub mod config;
mod error;
pub mod manifest;
pub mod pipeline;
pub mod svg;

pub use config::{DataSource, RunConfig, Seeds};
pub use error::{CliError, Result};
pub use pipeline::{MetricRow, Run, Stage};
