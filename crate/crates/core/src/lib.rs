//! Character-level Backpack language models.

pub mod config;
pub mod control;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Gradients, Mask, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Backpack32 = model::Backpack<f32>;
pub type Backpack64 = model::Backpack<f64>;
pub type Transformer32 = model::TransformerLm<f32>;
pub type Transformer64 = model::TransformerLm<f64>;
