//! Desk-scale self-supervised speech recognition lab.
//!
//! Everything runs on a synthetic tone corpus so experiments are reproducible
//! without external data: corpus synthesis and acoustic front-end ([`signal`]),
//! energy VAD and silence filtering ([`vadfilter`]), chunkwise attention
//! arithmetic ([`chunking`]), a small conformer-style encoder with exact
//! reverse-mode gradients ([`encoder`]), quantized target generation
//! ([`targets`]), masked-prediction pretraining ([`ssl`]) and CTC fine-tuning
//! with WER evaluation ([`ctc`]).

pub mod checkpoint;
pub mod chunking;
pub mod ctc;
pub mod encoder;
pub mod optim;
pub mod rng;
pub mod run;
pub mod signal;
pub mod ssl;
pub mod targets;
pub(crate) mod train;
pub mod vadfilter;

use thiserror::Error;

/// Errors shared across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
