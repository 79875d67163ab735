//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod gemm;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference, grad_check, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use tape::{AttnLayout, Segment, Tape, Var};
pub use tensor::{argmax, Tensor};

pub(crate) use tape::kl_row;
pub(crate) use tape::softmax_in_place;
