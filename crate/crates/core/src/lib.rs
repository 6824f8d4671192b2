//! Prototype-based attention: EM cross-attention prototyping, latent
//! synchronization, a Gaussian-mixture EM oracle and a small encoder for toy
//! flow and depth tasks.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod em;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod par;
pub mod pgm;
pub mod proto;
pub mod sync;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
