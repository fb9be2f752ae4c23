//! Reverse-mode automatic differentiation and the Adam optimizer.

mod params;
mod tape;

pub use params::{AdamConfig, Gradients, ParamStore};
pub use tape::{CustomOp, Op, Tape, Var, Var3};
