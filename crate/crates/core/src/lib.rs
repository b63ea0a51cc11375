//! Tokenizer-free hierarchical text-to-speech on continuous latents.
//!
//! Text bytes and past acoustic patches drive a causal language model whose
//! audio-slot states are squeezed through a finite scalar quantizer into a
//! coarse skeleton. A residual LM adds back continuous detail, and a
//! patch-local flow-matching transformer turns the result into latent frames
//! that a causal VAE decodes to 16 kHz audio.

pub mod ablate;
pub mod audio;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod dump;
pub mod error;
pub mod eval;
pub mod fsq;
pub mod infer;
pub mod locdit;
pub mod model;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod tensor;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
