//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)s.

mod gradcheck;
mod param;
mod tape;

pub use gradcheck::{
    finite_difference_check, finite_difference_check_params, finite_difference_report,
    finite_difference_report_params, FdReport,
};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{op_name, Gradients, OpKind, Tape, Var};
