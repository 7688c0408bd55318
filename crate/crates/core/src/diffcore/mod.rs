//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Only the primitives the matching network needs are provided. Gradients
//! are first order; a tape supports exactly one backward sweep.

mod gradcheck;
mod linalg;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::check_gradients;
pub use linalg::ConvSpec;
pub use ops::{concat, sigmoid_scalar, softplus_scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
