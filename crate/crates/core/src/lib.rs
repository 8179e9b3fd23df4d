//! Masked multi-label training of volumetric segmentation networks.
//!
//! The crate is `no_std` (with `alloc`) and carries everything that is pure
//! computation: a small reverse-mode autodiff engine with the 3D convolution
//! family, a pre-activation residual encoder/decoder, the presence-masked
//! multi-label loss, synthetic phantom volumes, the concentrated/distributed
//! label-subset samplers, an Adam training loop and Dice evaluation.
//!
//! File formats, the experiment runner and the command line live in the
//! `oarseg` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
mod conv;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod loss;
pub mod network;
pub mod phantom;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod training;
pub mod volume;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
