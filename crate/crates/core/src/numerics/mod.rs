//! Dense tensors, reverse-mode differentiation, Adam, and the Gaussian
//! primitives the trainers share.

mod adam;
mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, GradCheck};
pub use ops::{
    gaussian_kl, log_softmax, reparameterize, softmax, VariationalParams, LOGVAR_MAX, LOGVAR_MIN,
};
pub use tape::{Gradients, Tape, Var, LOG_FLOOR};
pub use tensor::Tensor;
