//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! Every trainable quantity in the crate is optimized through this module:
//! models bind a [`ParamSet`] onto a fresh [`Tape`], build a scalar objective
//! and call [`value_and_grad`], then update with [`adam_step`].

mod adam;
mod check;
pub mod linalg;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use check::{finite_diff_check, FiniteDiffReport, ParamCheck};
pub use params::{value_and_grad, value_only, Bindings, ParamSet};
pub(crate) use tape::sigmoid;
pub use tape::{softplus_inv, Gradients, Node, Tape, Var};
pub use tensor::Tensor;
