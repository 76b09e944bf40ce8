//! Reverse-mode automatic differentiation.

mod params;
mod tape;

pub use params::{Init, Param, ParamId, ParamKind, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub(crate) use tape::InputGrads;
