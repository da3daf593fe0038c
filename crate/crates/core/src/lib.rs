//! Algorithms for a frequency-modulated diffusion watermark attack.
//!
//! Everything here is `no_std` + `alloc`: images, spectra, diffusion algebra,
//! the patch sampler, the conditional noise estimator with its reverse-mode
//! gradients, training steps, watermark codecs, classical attacks and
//! metrics. File formats, configuration and the command line live in the
//! `fmdiff` crate.

#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

mod error;
pub mod attacks;
pub mod codecs;
pub mod dct;
pub mod diffusion;
pub mod fft;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod spectral;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use image::{ImageBuffer, PatchRect};
pub use rng::SeededRng;
