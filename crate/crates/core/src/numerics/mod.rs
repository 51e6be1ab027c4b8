// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic `f32` tensor arithmetic with reverse-mode gradients.

pub mod kernels;
mod ops;
mod pca;
pub mod stats;
mod tape;
mod tensor;

pub use ops::{conv2d, finite_diff_grad, matmul, max_relative_error, softmax};
pub use pca::{pca_top_k, Pca};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::Tensor;
