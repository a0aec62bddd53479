//! Temporal action detection with hybrid causal blocks: direction-restricted attention
//! fused with a decomposed bidirectional selective scan, inside a one-stage anchor-free
//! detector.

// index loops read closer to the math in the kernels; `!(x > 0.0)` is meant to catch NaN
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod attention;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod layers;
pub mod model;
pub mod pipeline;
pub mod postprocess;
pub mod rng;
pub mod ssm;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
