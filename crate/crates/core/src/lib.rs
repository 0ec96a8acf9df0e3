//! Hierarchical feature alignment for gloss-free sign language translation.
//!
//! Frame, segment and video features are aligned with pseudo-gloss
//! prototypes and with the spoken sentence before an autoregressive decoder
//! is fine-tuned on top. Everything runs on the small autodiff engine in
//! [`numerics`].

// Validation uses `!(x > 0.0)` so that NaN is rejected along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod data;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pseudo_gloss;
pub mod train;
pub mod translation;

pub use error::{Error, Result};
pub use numerics::{Element, Graph, Mode, ParameterStore, Tensor, Var};
