//! Attention/gating aggregation of per-view image features into per-point
//! features.
//!
//! For a point seen in views `i`, with sampled image features `f_i` and
//! viewing conditions `o_i`:
//!
//! ```text
//! f~_i = phi0(f_i)
//! z_i  = phi1(o_i)
//! x_i  = phi3([z_i, phi2(max_i z_i)])                 K quality scores
//! a_i  = softmax_i(x_i / sqrt(n))                      per block
//! g    = relu(tanh(alpha * max_i x_i + beta))          per block
//! P    = concat_k( g_k * sum_i a_ik * f~_i[block k] )
//! ```
//!
//! Reductions over a point's views always run in ascending image id order,
//! so outputs do not depend on how views are listed.

mod check;
mod checkpoint;
mod dd;
mod mlp;
mod model;

use thiserror::Error;

pub use check::{
    descriptor_sensitivity, grad_check, relative_error, Fault, GradCheckConfig, GradCheckReport,
    Sensitivity, TensorCheck,
};
pub use checkpoint::{
    from_bytes as checkpoint_from_bytes, load_checkpoint, manifest_hash, save_checkpoint,
    to_bytes as checkpoint_to_bytes, CheckpointError,
};
pub use dd::DoubleDouble;
pub use mlp::{Activation, Linear, Mlp, Scalar};
pub use model::{
    attention, backward, forward, forward_train, gating, init_params, init_params_with, pool,
    quality_scores, upstream_loss, view_encode, AggregationParams, Gradients, Intermediates,
    PooledFeatures, ViewBatch, TENSOR_NAMES,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error("bad dimensions: C={c} must be a positive multiple of K={k}, M={m} positive")]
    BadDims { c: usize, k: usize, m: usize },
    #[error("width mismatch: expected {expected}, found {found}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("point {point} lists image {image_id} twice")]
    DuplicateView { point: usize, image_id: u32 },
    #[error("backward needs the intermediates of a forward pass over the same batch")]
    MissingIntermediates,
    #[error("non-finite parameter")]
    NonFinite,
}
