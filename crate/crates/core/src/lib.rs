//! Emotion transfer between speech clips: DSP front end, a reverse-mode
//! autodiff engine, a vector-quantized emotion classifier and a
//! mel-to-mel generator, with evaluation metrics and a synthetic corpus.

pub mod audio;
pub mod autodiff;
pub mod classifier;
pub mod config;
pub mod data;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod persist;
pub mod pipeline;

use thiserror::Error;

/// Errors raised while building, running or training a model.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] autodiff::TensorError),
    #[error(transparent)]
    Dsp(#[from] audio::DspError),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("empty corpus: {0}")]
    EmptyCorpus(String),
}
