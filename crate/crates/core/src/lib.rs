//! Diffusion-based dysarthric speech reconstruction on a synthetic corpus.

pub mod autograd;
pub mod codec;
pub mod config;
pub mod content;
pub mod diffusion;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod speaker;
pub mod synthcorpus;
pub mod variance;

pub use error::{Error, Result};
