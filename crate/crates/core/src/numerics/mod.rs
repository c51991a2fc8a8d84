//! Dense kernels, divergences, differentiable layer stacks and SGD.

pub mod divergence;
pub mod gradcheck;
pub mod matrix;
pub mod optim;
pub mod stack;

pub use divergence::{
    cross_entropy, js_divergence, kl_divergence, sigmoid, softmax, softmax_backward, ProbVector, PROB_EPS,
};
pub use gradcheck::{central_difference, max_relative_error};
pub use matrix::{argmax, dot, Matrix};
pub use optim::Sgd;
pub use stack::{Activation, AffineLayer, DifferentiableStack, StackSpec};
