//! Differentiable tensor kernels and attention decoder modules for medical
//! image segmentation.

pub mod acfa;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod frequency;
pub mod gradcheck;
pub mod gradsuite;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod smmm;
pub mod tensor;
pub mod tffa;
pub mod training;

pub use autograd::{Gradients, Init, Param, ParamId, ParamKind, ParamStore, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
