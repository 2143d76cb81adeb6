//! Run-config driven pipeline behind the `stcast` binary: simulate data,
//! fit a model grid, forecast the test window and emit maps.

pub mod commands;
pub mod config;
pub mod error;
pub mod map;
pub mod tables;

pub use commands::{cmd_fit_grid, cmd_forecast, cmd_map, cmd_simulate, Report};
pub use config::RunConfig;
pub use error::CliError;
pub use map::MapPeriod;
