//! Dense `f64` tensors with reverse-mode differentiation and a
//! finite-difference verifier.

mod counter;
mod gradcheck;
mod tape;
mod tensor;

pub use counter::{OpCounter, Stage};
pub use gradcheck::{gradcheck, relative_error, GradReport, ParamReport, FD_STEP};
pub use tape::{argmax, sinusoid_freqs, softmax_row, Gradients, Tape, Var, NORM_EPS, POW_BASE_FLOOR};
pub use tensor::Tensor;
