//! Dense tensors with a reverse-mode gradient tape.
//!
//! Only the operations the model needs are provided. Training runs in `f32`;
//! gradient checks run the same code in `f64`.

mod gradcheck;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_check_at, GradCheckReport, REL_ERR_FLOOR};
pub use ops::{check_distribution, cosine_sim_matrix, cross_entropy, softmax_t, DIST_TOL, LOG_CLAMP, NORM_EPS};
pub use scalar::{gemm, matmul_threads, set_matmul_threads, DType, MatMut, MatRef, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
