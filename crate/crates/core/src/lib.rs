//! Lossless octree geometry coding for voxelized point clouds.
//!
//! A quantized cloud is serialized breadth-first into an octree whose node
//! occupancies (symbols in `1..=255`) are arithmetic coded under a learned
//! 255-way context model. The model can be enhanced with a child-count
//! predictor: an attention + MLP regressor whose output is mapped through a
//! discretized Gaussian and a softmax into an 8-dim feature that is injected
//! at the aggregation stage of the context model.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, training loops and
//! the command-line tool live in the `acnp` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod acnp;
pub mod checkpoint;
pub mod cloud;
pub mod codec;
pub mod context;
pub mod context_model;
pub mod entropy;
mod error;
pub mod nn;
pub mod octree;

pub use error::{Error, Result};
