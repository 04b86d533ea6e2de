//! Training-free multi-label inference from frozen image-text embeddings.
//!
//! Patch embeddings are first scored against text prototypes, the most
//! confident ones seed a closed-form Gaussian discriminant in the visual space
//! ([`pvcl`]), and image scores fuse max-pooled patch evidence with the global
//! CLS prediction ([`paa`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod paa;
pub mod pipeline;
pub mod pvcl;
pub mod store;
pub mod synth;
pub mod zeroshot;

pub use error::{PiaaError, Result};

/// Multiplier applied to cosine similarities before every text softmax.
pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;
