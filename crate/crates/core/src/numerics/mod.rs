//! Dense tensors, tape-based reverse-mode differentiation, layer kernels,
//! a finite-difference gradient checker and AdamW.

mod gradcheck;
pub mod kernels;
mod optim;
mod params;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_sampled, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use kernels::{layer_norm, matmul, softmax_with_bias, NEG_LARGE};
pub use optim::{adamw_step, AdamW};
pub use params::{Parameter, ParameterStore};
pub use rng::RngStream;
pub use tape::{AttnBias, GradMap, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tape_tests;
