//! Tape-based reverse-mode differentiation over dense `f64` tensors.

mod gradcheck;
mod mlp;
mod params;
mod tape;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use mlp::Mlp;
pub use params::ParamStore;
pub use tape::{Gradients, OpKind, Tape, Var};
