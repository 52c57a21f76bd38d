//! Dense tensors, hand-written forward/backward primitives and a
//! finite-difference gradient checker.

pub(crate) mod gemm;
mod gradcheck;
mod ops;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamReport};
pub use ops::{
    argmax, cross_entropy_logits, dropout, dropout_backward, layer_norm, layer_norm_backward,
    matmul, matmul_backward, relu, relu_backward, softmax_rows, softmax_rows_backward,
    DropoutMask, LayerNormCache, LAYER_NORM_EPS,
};
pub(crate) use ops::{softmax_backward_row, softmax_in_place};
pub use rng::{Rng, RngState};
pub use tensor::{Real, Tensor};
