//! Numeric core of a mixer-block CycleGAN.
//!
//! Everything here is deterministic, allocation-based `no_std` code:
//! a reverse-mode autodiff tape over dense `f64` tensors, the generator and
//! PatchGAN discriminator, the LSGAN/cycle/perceptual objective, Adam with a
//! linear-decay schedule, an exact activation/parameter cost model and
//! KID/FID estimators. File formats, IO and the CLI live in the `mixergan`
//! crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
