//! Memorize-and-generate streaming video pipeline at desk scale.
//!
//! The crate is organized around the pipeline's stages:
//!
//! - [`synthworld`]: procedural panorama videos with leave-and-return camera
//!   trajectories, plus clip serialization.
//! - [`nn`]: a small differentiable substrate (tensors, reverse-mode tape,
//!   masked attention, rotary embeddings, Adam, gradient checking).
//! - [`model`]: the diffusion transformer shared by every role, the KV cache
//!   with retention policies, and the attention mask builders.
//! - [`flow`]: flow-matching losses, the few-step Euler sampler, and the
//!   score-difference generator objective with its empty-condition variant.
//! - [`memory`]: stage-1 training that compresses each block into its final
//!   frame's cache and reconstructs the block from it.
//! - [`generator`]: stage-2 rolling long-video training against the frozen
//!   memory model.
//! - [`streaming`]: block-by-block inference sessions with cache-mode
//!   baselines and performance accounting.
//! - [`magbench`]: the leave-and-return historical-consistency benchmark and
//!   best-match evaluation.

pub mod error;
pub mod flow;
pub mod generator;
pub mod magbench;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod runcfg;
pub mod streaming;
pub mod synthworld;

pub use error::{MagError, Result};
