//! Dense tensors and a reverse-mode differentiation tape.
//!
//! Values are generic over the float type so gradient checks can run in
//! double precision; models train in `f32`.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, operator_sweep, OperatorCheck};
pub use kernels::Scalar;
pub use tape::{Tape, Var, MASK_FILL};
pub use tensor::Tensor;

/// Layer-norm epsilon used by the model.
pub const LN_EPS: f32 = 1e-5;
