//! Spatially sparse dynamic convolutions.
//!
//! Residual blocks carry a small mask unit that decides, per pixel, whether the
//! residual function runs. Training uses a binary Gumbel-Softmax gate with a
//! straight-through gradient and FLOPs-budget losses; inference gathers the
//! active pixels into a dense `P x C` tensor, runs the block on it and
//! scatters the result back.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod budget;
pub mod error;
pub mod gating;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod sparse;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor4D};
