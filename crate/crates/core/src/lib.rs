//! Keyword-driven medical image captioning.
//!
//! A small reverse-mode autodiff core ([`autodiff`]) underpins image and
//! keyword encoders, several image/keyword fusion strategies, LSTM and
//! transformer caption decoders, a keyword predictor and a disease classifier.
//! Around the model sit greedy/beam search, caption metrics, a synthetic
//! dataset generator, an Adam training loop with binary checkpoints, and the
//! `medcap` command-line tool.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod datasynth;
pub mod decoders;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod heads;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod search;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
