//! Command line front end of `dance-core`: point cloud formats, datasets on
//! disk, checkpoints, run configuration, CSV reports, and the `dance`
//! subcommands.

pub mod args;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod report;
pub mod threads;

pub use checkpoint::Checkpoint;
pub use commands::run;
pub use config::RunConfig;
pub use error::{CliError, ParseError, Result};
