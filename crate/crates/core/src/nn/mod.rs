//! Minimal reverse-mode neural network kernels, optimizers and the motion
//! tokenizer built on them.

mod check;
mod conv;
mod graph;
mod optim;
mod params;
mod suite;
mod tensor;
pub mod tokenizer;

pub use check::{grad_check, rel_error, GradCheck, GradCheckReport};
pub use conv::{conv1d_out_len, conv_transpose1d_out_len};
pub use graph::{GradBuf, Gradients, Graph, SteOffsets, Var, MASK_NEG};
pub use optim::{Adam, Sgd, StepLr};
pub use params::ParamStore;
pub use suite::{op_gradient_suite, tokenizer_gradient_check};
pub use tensor::Tensor;
