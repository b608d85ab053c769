//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{log1p_sum_exp, Tape, Var, ROW_SUM_GUARD};
pub use tensor::Tensor;
