//! A small deep-learning framework for residual networks whose residual
//! branches can be scaled by stochastic coefficients that differ between
//! the forward and the backward pass (ShakeDrop, RandomDrop, Shake-Shake,
//! Single-branch Shake).

pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod kernels;
pub mod network;
pub mod regularizers;
pub mod tensor;
pub mod train;

pub use autograd::{ParamId, ParamStore, Parameter, Tape, Targets, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
