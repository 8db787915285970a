//! Multi-spectral (EO/IR) semantic segmentation with shared-weight dual-branch
//! encoders, mixed feature exchange, gated spectral fusion and two-stage
//! knowledge distillation, built on a small reverse-mode autodiff core.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod exchange;
pub mod gradcheck;
pub mod graph;
pub mod gsu;
mod kernels;
pub mod labels;
pub mod layers;
pub mod losses;
pub mod network;
pub mod optim;
pub mod param;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Mode, Tape, Var};
pub use tensor::{Shape, Tensor};
