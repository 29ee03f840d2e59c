//! Multi-window masked autoencoders (MW-MAE) for audio spectrograms.
//!
//! The crate covers the whole desk-scale pipeline: a small autodiff
//! tensor engine ([`tensor`]), log-mel features ([`audio`]), windowed
//! multi-head attention ([`attention`]), the masked autoencoder
//! ([`mae`]), AdamW pretraining ([`train`]), attention-head analysis
//! ([`analysis`]), downstream evaluation ([`eval`]) and synthetic
//! corpora ([`datasets`]).

pub mod analysis;
pub mod attention;
pub mod audio;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod mae;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
