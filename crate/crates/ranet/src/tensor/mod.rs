//! Dense 4-D tensor numerics with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: exactly the layer set the network needs
//! (convolution, batch norm, ReLU, pooling, bilinear upsampling, channel
//! concatenation, linear, softmax cross-entropy) plus a handful of scalar
//! helpers used to assemble losses. All values are stored in `f32`;
//! reductions (means, variances, loss averaging) accumulate in `f64`.

mod gradcheck;
mod ops;
mod param;
mod tape;
mod tensor;


pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use ops::softmax_rows;
pub use param::{BnStats, Param, ParamId, ParamRole, ParamStore};
pub use tape::{BnMode, Tape, Var};
pub use tensor::Tensor;
