//! Dense and sparse matrices with a reverse-mode differentiation tape.

mod gradcheck;
mod matrix;
mod params;
mod sparse;
mod tape;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport};
pub use matrix::{dot, Matrix};
pub use params::{BoundParams, ParameterStore};
pub use sparse::{SparseMatrix, SparsePattern};
pub use tape::{Gradients, Tape, Var};

pub(crate) use tape::softmax_in_place;
