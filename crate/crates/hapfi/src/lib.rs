//! File formats, checkpoints, configuration and the command line for
//! [`hapfi_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod report;

pub use error::{HapfiError, Result};
