//! Dense tensors and reverse-mode differentiation.
//!
//! Only the operations the correspondence pipeline needs are provided:
//! matrix products, row-wise normalizations and softmax, elementwise
//! arithmetic, masking, and a fused softmax/cross-entropy. Broadcasting is
//! limited to adding a bias row.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckOptions, GradCheckReport, Probe};
pub use graph::{Bindings, Graph, NodeId, Op, NORM_EPS};
pub use params::ParamSet;
pub use tensor::{Precision, Real, Tensor};
