//! File formats, configuration and command implementations for the
//! `mixergan` binary. The model itself lives in `mixergan-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod ppm;
pub mod run;

pub use error::{AppError, AppResult};
