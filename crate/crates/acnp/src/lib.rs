//! Point-cloud IO, synthetic corpora, training, benchmarking and the
//! command-line codec built on `acnp-core`.

pub mod bench;
pub mod config;
pub mod dataset;
pub mod demo;
pub mod ply;
pub mod synth;
pub mod trainer;
