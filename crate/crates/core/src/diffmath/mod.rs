//! Small dense-array engine with reverse-mode gradients.
//!
//! Only the operations the model needs are provided, every one with an
//! explicit shape contract (no broadcasting beyond a row bias).

mod array;
mod gemm;
mod gradcheck;
mod tape;

pub use array::{cosine, Array};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckConfig, GradCheckReport, ParamCheck};
pub use tape::{log_sigmoid, Grads, KeyRange, Tape, Var};

pub(crate) use array::dot;
pub(crate) use tape::softmax_in_place;
