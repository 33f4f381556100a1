//! Minimal CPU tensor library with reverse-mode autodiff, sized for small
//! convolutional image models.
//!
//! All tensors are four-dimensional (`NCHW`). Operations are recorded on a
//! [`Graph`]; [`Graph::backward`] returns gradients for every leaf created
//! with [`Graph::input`] or a trainable [`Graph::param`]. Everything is
//! generic over [`Scalar`] so that the same model code runs in `f32` for
//! training and in `f64` for finite-difference verification.

pub mod conv;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use conv::PixelSet;
pub use graph::{Grads, Graph, Var};
pub use optim::{clip_grad_inf_norm, sgd_update, Adam, CosineRestarts};
pub use tensor::{matmul, Scalar, Tensor};
