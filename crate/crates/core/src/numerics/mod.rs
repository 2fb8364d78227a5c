//! Dense tensors and the small reverse-mode engine every loss is built on.
//!
//! All arithmetic is `f64`. Forward ops reject non-finite results, and the
//! exponential-based kernels (softmax, log-softmax, smooth maximum) are
//! max-shifted.

mod graph;
mod tensor;

pub use graph::{
    cosine, degenerate_rows, log_sum_exp, smooth_max, softmax_in_place, Graph, Var, NORM_EPS,
};
pub use tensor::Tensor;

pub(crate) use graph::correlation_with_mask;
