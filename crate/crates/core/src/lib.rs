//! Core engine for MAGE: modality-agnostic music generation and editing.
//!
//! The crate implements a complete desk-scale pipeline:
//!
//! - [`synthbench`] — deterministic synthetic benchmark: harmonic instrument
//!   sources, mixtures, paired pseudo-video features, dataset assembly.
//! - [`mixwavcodec`] — convolutional waveform codec producing continuous
//!   latent sequences, trained with reconstruction, spectral, and adversarial
//!   losses.
//! - [`condkit`] — conditioning toolkit: text prompt embeddings, temporal
//!   scene attention over visual features, and audio-visual nearest-neighbor
//!   alignment (AVNA).
//! - [`fluxformer`] — U-shaped transformer velocity field over codec
//!   latents, trained by conditional flow matching with masked multimodal
//!   conditioning.
//! - [`sampler`] — Euler ODE integration with optional classifier-free
//!   guidance, plus the generation and editing entry points.
//! - [`evalkit`] — evaluation: BSS separation metrics, Fréchet audio
//!   distance, and a toy embedding model for similarity scores.
//!
//! All tensor math is generic over the [`scalar::Scalar`] type (`f32` or
//! `f64`); training defaults to `f32` while gradient-verification suites run
//! the identical code at `f64`. Concrete aliases for the common case are
//! exported at the crate root.

pub mod audio;
pub mod check;
pub mod ckpt;
pub mod condkit;
pub mod error;
pub mod evalkit;
pub mod fluxformer;
pub mod graph;
pub mod linalg;
pub mod mixwavcodec;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod stft;
pub mod synthbench;

pub use error::{ErrorCategory, MageError, Result};
pub use scalar::Scalar;

/// Default training scalar type.
pub type TrainScalar = f32;

/// Scalar type used by gradient-verification suites.
pub type CheckScalar = f64;

/// Waveform at the default training precision.
pub type Waveform32 = audio::Waveform<f32>;

/// Waveform at verification precision.
pub type Waveform64 = audio::Waveform<f64>;
