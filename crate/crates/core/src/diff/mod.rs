//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! Only the primitives the survival transformer needs are provided. Every
//! trainable value flows through a [`Graph`], which records operations as
//! they execute and replays them in reverse in [`Graph::backward`].

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{masked_softmax_row, AttnLayout, Graph, Mode, Var, LN_EPS, LOG_FLOOR, MASK_NEG};
pub use params::{init_normal, Params};
pub use tensor::Tensor;
