//! Minimal reverse-mode automatic differentiation: tensors, a recording tape
//! with the DCGAN layer set, optimizers and finite-difference checking.

mod element;
pub mod gradcheck;
pub(crate) mod kernels;
pub mod optim;
mod tape;
mod tensor;

pub use element::Element;
pub use gradcheck::{check_layer_kind, grad_check, layer_case, GradCheckConfig, GradCheckReport, LayerCase, LAYER_KINDS};
pub use kernels::{conv_out, conv_transpose_out};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use tape::{BatchStats, Gradients, LayerKind, Tape, Var, BCE_CLAMP, BN_EPS, LEAKY_SLOPE};
pub use tensor::Tensor;
