//! Streaming Mel-spectrogram vocoder: STFT framing, Mel pseudoinverse
//! decoding, a frame-causal network sampled with an Euler flow solver, and a
//! non-learned phase-retrieval baseline.

pub mod audio_io;
pub mod config;
pub mod dsp;
pub mod error;
pub mod flow;
pub mod mel;
pub mod metrics;
pub mod model_io;
pub mod net;
pub mod phase;
pub mod signals;
pub mod verify;

pub use error::{Error, Result};
