//! Reverse-mode differentiation over a recorded tape, plus the parameter
//! store and optimiser that consume its gradients.

mod params;
mod tape;

pub use params::{ParamId, ParameterStore};
pub use tape::{Gradients, Tape, Var};
