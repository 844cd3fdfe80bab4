//! Core of the sketch/photo retrieval laboratory.
//!
//! Everything here is pure computation over `alloc` collections: dense `f64`
//! tensors with a small reverse-mode gradient engine, a prompt-injected toy
//! patch transformer with a frozen backbone, the metric-learning objectives,
//! patch-shuffle augmentation, a synthetic paired dataset generator, triplet
//! samplers, Adam, and the retrieval metrics. File formats, configuration and
//! the command line live in the `zslab` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod augment;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod param;
pub mod sampler;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use param::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
