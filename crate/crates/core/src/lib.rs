pub mod container;
pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod kd;
pub mod compress;
pub mod optim;
pub mod store;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Scalar, Tensor};
