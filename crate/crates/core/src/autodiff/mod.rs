//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_with, relative_error, FdOptions, FdReport, FdWorst};
pub use params::ParamSet;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
