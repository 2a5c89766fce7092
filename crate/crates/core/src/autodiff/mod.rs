//! Dense tensors with reverse-mode differentiation.

pub mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod real;
mod tensor;

pub use gradcheck::{
    check_gradients, check_gradients_at, finite_difference_report, primitive_cases, primitive_suite, probe, GradReport,
    PrimitiveCase, DEFAULT_STEP,
};
pub use graph::{permute_index, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use params::{grad, Binder, GradMap, Param, ParamKind, ParamStore};
pub use real::Real;
pub use tensor::{numel, Tensor};
