//! Differentiable computation core: tensors, a reverse-mode tape, layers,
//! encoders, the optimizer and finite-difference gradient verification.

pub mod encoders;
pub mod gradcheck;
mod graph;
pub mod layers;
pub mod loss;
pub mod optim;
mod params;
pub mod posenc;
mod tensor;

pub use graph::{AttentionSpec, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use params::{Init, Param, ParamTree, INIT_STD};
pub use tensor::{Scalar, Tensor};
