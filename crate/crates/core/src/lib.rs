pub mod autograd;
pub mod cli;
pub mod data;
pub mod divergence;
pub mod error;
pub mod evaluation;
pub mod nets;
pub mod posterior;
pub mod tensor;
pub mod training;

pub use autograd::{gradient_check, Gradients, Padding, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
