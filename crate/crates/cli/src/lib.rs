//! Pipeline behind the `crowdcal` binary: configuration, file formats,
//! stages and the run manifest.

pub mod config;
pub mod error;
pub mod fixture;
pub mod io;
pub mod manifest;
pub mod pipeline;

pub use config::{LoadedConfig, RunConfig};
pub use error::{CliError, CliResult};
