//! Dense `f64` arrays with a reverse-mode tape.

mod array;
mod gradcheck;
pub mod kernels;
mod tape;

pub use array::Array;
pub use gradcheck::{finite_diff_check, finite_diff_check_five_point, rel_error, GradCheck};
pub use tape::{concat, log_softmax_rows, Gradients, Tape, Var};
