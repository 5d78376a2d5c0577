//! Acoustic environment-effect conversion for speech.
//!
//! Given a source utterance and a reference recorded in some acoustic
//! environment, this crate converts the source so it sounds as if spoken in
//! the reference's environment, while keeping the content and speaker
//! intact. It covers the whole desk-scale workflow:
//!
//! - [`dataset`]: synthesize parametric room impulse responses, convolve a
//!   clean corpus, and emit a 5x labeled dataset (clean + four rooms).
//! - [`features`]: 22.05 kHz mel spectrograms (80 channels), autocorrelation
//!   F0, per-frame energy, fixed-length padding, and a binary feature cache.
//! - [`model`]: the conversion network — a convolutional mel encoder, a
//!   U-Net effect extractor, an effect encoder with a controllable strength
//!   factor, a variance adaptor, a transformer mel decoder, and two
//!   environment classifiers trained through gradient reversal.
//! - [`training`]: the five-term loss, paired-batch assembly, the staged
//!   three-phase schedule, Adam, and checkpointing.
//! - [`inference`]: reference-conditioned conversion and a Griffin-Lim
//!   vocoder (with a plug-in hook for an external neural vocoder).
//! - [`evaluation`]: mel-cepstral distortion and comparison plots.
//!
//! The `envfx` binary wires these into six subcommands (`make-dataset`,
//! `extract-features`, `train`, `convert`, `evaluate`, `plot`); the
//! `examples/` directory shows each capability as a runnable program.

pub mod audio;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod inference;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
