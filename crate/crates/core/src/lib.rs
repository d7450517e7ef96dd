//! Variational facial style transfer on a synthetic blendshape face.
//!
//! A style encoder compresses an expression sequence (with its aligned
//! phonetic posteriorgram) into a fixed-length feature; a variational
//! enhancer turns that into a Gaussian posterior refined by a Householder
//! flow; a hybrid decoder predicts speech-weak parameters autoregressively
//! and speech-strong parameters with a non-autoregressive transformer.

pub mod autograd;
pub mod error;
pub mod eval;
pub mod face;
pub mod model;
pub mod store;
pub mod synth;
pub mod trainer;
pub mod variational;

pub use error::{Error, Result};
