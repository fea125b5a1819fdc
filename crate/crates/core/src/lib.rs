//! Layer merging for small decoder-only transformers.
//!
//! Per-layer activations are embedded with diffusion maps, layer pairs are
//! scored by Gaussian normalized mutual information, and the most similar
//! adjacent layers are fused by weighted parameter averaging.

pub mod container;
pub mod error;
pub mod infotheory;
pub mod linalg;
pub mod manifold;
pub mod merge;
pub mod model;
pub mod rng;
pub mod similarity;

pub use error::{Error, Result};
