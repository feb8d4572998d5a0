//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod ckwt;
mod conv;
mod gradcheck;
mod graph;
mod kernels;
mod norm;
mod ops;
mod tensor;

pub use ckwt::{read_ckwt, write_ckwt, CKWT_MAGIC, CKWT_VERSION};
pub use conv::{conv_output_size, ConvOptions};
pub use gradcheck::{analytic_gradients, grad_check, grad_check_entries, relative_error, GradCheckEntry, GradCheckReport};
pub use graph::{Graph, Var};
pub use norm::{group_count, GroupNormParams, DEFAULT_GN_EPSILON, GROUP_SIZE_CAP};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
