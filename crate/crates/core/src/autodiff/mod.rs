//! Reverse-mode differentiation over dense tensors.

mod grad_check;
mod optim;
mod tape;

pub use grad_check::{
    grad_check, probe, random_inputs, registered_ops, relative_error, GradCheckFailure,
    GradCheckReport, OpCase, REL_ERROR_FLOOR,
};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use tape::{backward, CustomBackward, Gradients, Tape, Var, CLAMP_EPS, LAYER_NORM_EPS};

pub(crate) use tape::bce_scalar;
