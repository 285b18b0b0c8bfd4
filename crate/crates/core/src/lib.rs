//! Quasi-periodic WaveNet (QPNet) vocoder engine with a statistical
//! voice-conversion front-end.
//!
//! The crate is organised bottom-up:
//!
//! * [`codec`]: waveform buffers, μ-law companding, continuous F0 and
//!   frame-to-sample upsampling, plus the WAV and feature-file formats.
//! * [`analysis`]: autocorrelation F0, log-mel cepstrum and two-band
//!   aperiodicity extractors.
//! * [`dilation`]: pitch-dependent dilation factors, per-layer dilation
//!   plans and receptive-field arithmetic.
//! * [`net`]: a small dense kernel with a reverse-mode tape, Adam and a
//!   finite-difference checker.
//! * [`vocoder`]: WN / QPNet assembly, teacher-forced training and cached
//!   autoregressive generation.
//! * [`converter`]: framewise DNN spectral mapping, MLPG, GV postfilter and
//!   log-F0 transformation.
//! * [`adaptation`]: speaker-dependent fine-tuning (output layers only or the
//!   whole network).
//! * [`metrics`]: mel-cepstral distortion and log-F0 RMSE.
//! * [`corpus`]: a synthetic multi-speaker quasi-periodic corpus.

pub mod adaptation;
pub mod analysis;
pub mod codec;
pub mod converter;
pub mod corpus;
pub mod dilation;
mod error;
pub mod metrics;
pub mod net;
pub mod vocoder;

pub use error::{Error, Result};
