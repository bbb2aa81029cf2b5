//! Quality-aware multimodal learning on a small reverse-mode tensor engine.
//!
//! The crate is `no_std` with `alloc`. File formats, checkpoints and the
//! command line live in the `umq` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod corruption;
pub mod dataio;
pub mod decouple;
pub mod enhancer;
pub mod error;
pub mod estimator;
pub mod moe;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
