//! Core numerics for gated 3D feature injection into a diffusion action
//! policy.
//!
//! The crate is `no_std` (with `alloc`): it contains the tensor/autodiff
//! engine, the synthetic depth provider, point-cloud geometry, the PointNet
//! encoder, the transformer-diffusion action expert and the lightweight
//! assistant that feeds gated injections into it. File formats, the
//! training harness and the command line live in the `depth-inject` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod assistant;
pub mod benchmark;
pub mod diffusion;
pub mod error;
pub mod expert;
pub mod geometry;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod pointnet;
pub mod policy;
pub mod rng;
pub mod scene;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{Adam, AdamConfig, Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
