//! Dense tensors, reverse-mode differentiation and base neural operators.

mod gradcheck;
pub mod ops;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params};
pub use ops::{
    cross_entropy, depthwise_conv1d, layer_norm, linear, sigmoid, silu, silu_scalar, softmax_rows, softplus,
    softplus_scalar, ConvMode, LAYER_NORM_EPS,
};
pub use params::{Param, ParamStore};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
#[allow(unused_imports)]
pub(crate) use tensor::{matmul_a_bt_into, matmul_at_b_into, matmul_into};
