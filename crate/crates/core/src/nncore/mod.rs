//! Minimal reverse-mode differentiation engine plus the dense layers,
//! initializer and optimizer the networks are built from.

mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{CustomOp, Gradients, Graph, Var};
pub use layers::{he_init, Activation, DenseLayer, Mlp};
pub use optim::{Adam, AdamConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
