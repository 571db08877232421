//! Dense linear algebra and a small feedforward network with explicit
//! forward and backward passes.

mod matrix;
mod mlp;

pub use matrix::{cholesky, cholesky_solve, dot, psd_solve, Matrix};
pub use mlp::{
    argmax, axpy_params, loss_and_grad, mean_loss_and_accuracy, mlp_backward, mlp_forward,
    per_sample_grads, softmax_cross_entropy, Activation, ForwardTrace, Layer, MlpParams,
};
