pub mod data;
pub mod error;
pub mod harness;
pub mod loss;
pub mod meta;
pub mod nets;
pub mod pairgen;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Gradients, ParamSet, Rng, Tape, Tensor, Var};
