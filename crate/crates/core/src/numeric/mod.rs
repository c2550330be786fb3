//! Dense tensors, named parameters, and reverse-mode gradients.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckEntry, GradCheckReport, REL_ERROR_FLOOR};
pub use params::{NamedTensor, ParamId, ParamSnapshot, ParamStore, Parameter};
pub use tape::{backward_into, sigmoid, softplus, Activation, Gradients, Tape, Var, MASK_NEG};
pub use tensor::Tensor;

