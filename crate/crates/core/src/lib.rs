//! Reconstruction of 3-D hand trajectories from multichannel EEG.
//!
//! The crate covers the whole decoding pipeline: session ingest
//! ([`io`]), signal conditioning ([`preprocess`]), bad-trial rejection
//! ([`qc`]), lag-window datasets ([`dataset`]), a small reverse-mode
//! differentiation engine ([`grad`]), the convolutional/recurrent decoder
//! ([`model`]), the correlation-aware loss plus training and evaluation
//! ([`train`]), event-related potential analysis ([`erp`]) and a synthetic
//! session generator with a linear attainability oracle ([`synth`]).

pub mod io;
pub mod matrix;
pub mod preprocess;
pub mod qc;
pub mod pipeline;
pub mod dataset;
pub mod grad;
pub mod model;
pub mod train;
pub mod erp;
pub mod synth;
pub mod error;
pub mod config;

pub use error::Error;
pub use matrix::Matrix;
