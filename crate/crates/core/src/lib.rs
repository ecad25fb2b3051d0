//! Naturalness MOS prediction for synthesized and voice-converted speech.
//!
//! The pipeline runs a waveform through a 48-band log-mel front-end, slices
//! the spectrogram into overlapping 150 ms segments, encodes each segment
//! with a six-layer CNN and reads the segment sequence with a bidirectional
//! LSTM into one scalar score. The crate also carries everything needed to
//! train that network: a small reverse-mode autodiff engine, a degradation
//! simulator for building a proxy-labelled pretraining corpus, the two-stage
//! training protocol and per-stimulus/per-system evaluation.

pub mod audio_io;
pub mod autograd;
pub mod degrade;
pub mod features;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synth;
pub mod training;
