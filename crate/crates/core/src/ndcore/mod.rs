//! Dense f64 kernels with hand-written reverse-mode gradients.
//!
//! Only the handful of operations the training and evaluation code needs are
//! provided. Every reduction runs sequentially in a fixed order, so identical
//! inputs give bitwise-identical outputs.

mod gradcheck;
mod loss;
mod ops;
mod tensor;

pub use gradcheck::{grad_check, rel_error, GradCheckReport, Stencil};
pub use loss::{infonce_loss, softmax_cross_entropy, symmetric_infonce_loss, InfoNce};
pub use ops::{
    l2norm_rows, l2norm_rows_backward, leaky_relu, leaky_relu_backward, linear,
    linear_backward, nn_downsample, nn_downsample_backward, nn_source_index, LinearGrads,
    DEFAULT_L2_EPS,
};
pub use tensor::Tensor2;

/// Sum of `values` taken in ascending order, so the result does not depend on
/// the order the terms arrive in.
pub fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}
