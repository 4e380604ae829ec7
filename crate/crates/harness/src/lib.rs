//! Experiment harness: configuration files, pipeline stages, layer probing,
//! experiment grids and plot-ready CSV reports for the tonelab toolkit.

pub mod config;
pub mod grid;
pub mod pipeline;
pub mod probe;
pub mod report;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] tonelab_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 1 validation/config, 2 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(tonelab_core::Error::Divergence(_)) => 2,
            _ => 1,
        }
    }
}
