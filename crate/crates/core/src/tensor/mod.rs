//! Dense and sparse kernels plus the reverse-mode tape.

mod dense;
pub mod gradcheck;
pub mod linalg;
mod sparse;
mod tape;

pub use dense::{argmax, dot, DenseMatrix};
pub use gradcheck::{finite_difference_check, ExcludedEntry, FdReport};
pub use sparse::SparseCsr;
pub use tape::{gat_attention, log_sum_exp, Gradients, LeafKind, Tape, Var};
