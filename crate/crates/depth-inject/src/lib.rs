//! File formats, run configuration, training harness and gradient suite
//! for a diffusion action policy with gated 3D feature injection.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod depth_file;
pub mod error;
pub mod gradsuite;
pub mod harness;
pub mod metrics;
pub mod ply;

pub use error::{Error, Result};
